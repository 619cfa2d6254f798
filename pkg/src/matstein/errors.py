"""Exception hierarchy shared across the package."""


class MatsteinError(Exception):
    """Base class for all package errors."""


class ValidationError(MatsteinError, ValueError):
    """Invalid input: shapes, parameter ranges, missing configuration."""


class NotPositiveDefiniteError(ValidationError):
    """A matrix failed the symmetric positive-definite check."""


class DimensionError(ValidationError):
    """Shape mismatch or dimension above the configured cap."""


class NumericalError(MatsteinError, ArithmeticError):
    """A computation produced an unusable intermediate (e.g. rank deficiency)."""


class FlipFlopError(NumericalError):
    """Non-PD intermediate inside a flip-flop iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class UncertifiedFunctionError(ValidationError):
    """Test function lacks the metadata certifying membership in a class."""
