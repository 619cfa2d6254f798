"""Stein's method toolkit for the matrix normal law."""

__version__ = "0.1.0"

from .errors import (DimensionError, FlipFlopError, MatsteinError, NotPositiveDefiniteError,
                     NumericalError, UncertifiedFunctionError, ValidationError)
from .matcore import SymPD, kron, norms, sym_sqrt
from .distributions import (MatrixNormalParams, MatrixTParams, SampleBatch, inv_wishart_trace_moments,
                            log_density_matrix_normal, log_density_matrix_t, matrix_t_frobenius_moments,
                            sample_matrix_normal, sample_matrix_t, sample_wishart)
from .stein import (FunctionMeta, TestFunction, langevin_t_generator, ou_generator, quadratic_probe,
                    stein_identity_estimate, t_drift)
from .solver import QuadratureConfig, SteinSolution, regularity_bound_rhs, solve_stein, stein_residual
from .ou import OUConfig, coupled_contraction, euler_path, exact_transition_sample, hk_lower_estimate
from .estimators import (FlipFlopConfig, StructuredBasis, masked_flipflop, psi_update,
                         rescale_identifiability, shrink, sigma_update, structured_projection,
                         weighted_flipflop)
from .bounds import (MomentSummary, calibrated_family, clt_bound_d2, clt_bound_d3, discrepancy_estimate,
                     estimate_moments, t_normal_bound)
