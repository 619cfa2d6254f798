"""Test functions and the two Stein operators.

A :class:`TestFunction` is vectorised: ``h(X)`` accepts an array of shape
``(..., nu, d)`` and returns shape ``(...)``. Gradients follow the same
convention with trailing ``(nu, d)``; Hessians return ``(..., nu, d, nu, d)``
or anything broadcastable to it (constant Hessians are returned unbatched).

The matrix normal Stein (OU generator) operator is

    A f(X) = -tr(X^T grad f(X)) + sum_{i,k,j,l} Psi_ik Sigma_jl d^2 f / dX_ij dX_kl,

and the matrix T Langevin operator replaces ``-X`` by the drift :func:`t_drift`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, ValidationError
from .matcore import as_real_matrix, as_sympd, kron

FD_STEP = 1e-4


@dataclass(frozen=True)
class FunctionMeta:
    """Seminorm data certifying the regularity of a test function.

    Attributes
    ----------
    holder_alpha, holder_const : float, optional
        Exponent ``alpha`` in (0, 1] and a bound for the Hoelder seminorm ``[h]_alpha``.
    coord_deriv_sups : dict
        ``{m: c}`` with ``c`` bounding, over all index tuples of length ``m``,
        the Lipschitz constant (in Frobenius norm) of the ``(m-1)``-th order
        coordinate partials of ``h``. ``m = 1`` is the Lipschitz constant of ``h``.
    frechet_sups : dict
        ``{k: M_k(h)}``: sup over ``X`` of the operator norm of the ``k``-th
        Frechet derivative with unit-Frobenius arguments.
    bounded_sup : float, optional
        Bound for ``sup |h - E h(Z)|`` under the reference matrix normal law.
    classes : frozenset
        Smooth Wasserstein classes (``"H1"``, ``"H2"``, ``"H3"``) the function
        is certified to belong to.
    """

    holder_alpha: Optional[float] = None
    holder_const: Optional[float] = None
    coord_deriv_sups: dict = field(default_factory=dict)
    frechet_sups: dict = field(default_factory=dict)
    bounded_sup: Optional[float] = None
    classes: frozenset = frozenset()

    def __post_init__(self):
        if self.holder_alpha is not None and not 0 < self.holder_alpha <= 1:
            raise ValidationError(f"holder_alpha must lie in (0, 1], got {self.holder_alpha}")
        for name in ("holder_const", "bounded_sup"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValidationError(f"{name} must be nonnegative, got {v}")
        for name in ("coord_deriv_sups", "frechet_sups"):
            for k, v in getattr(self, name).items():
                if int(k) < 1 or not v >= 0:
                    raise ValidationError(f"{name}[{k}] = {v} is not a nonnegative bound of order >= 1")
        object.__setattr__(self, "classes", frozenset(self.classes))


@dataclass(frozen=True)
class TestFunction:
    """Vectorised scalar function on ``nu x d`` matrices with optional derivatives."""

    __test__ = False  # not a pytest class

    evaluator: Callable
    gradient: Optional[Callable] = None
    hessian: Optional[Callable] = None
    meta: FunctionMeta = field(default_factory=FunctionMeta)
    shape: Optional[tuple] = None
    name: str = "h"
    closed_form_generator: Optional[Callable] = None

    def __call__(self, X):
        return self.evaluator(np.asarray(X, dtype=float))

    def with_meta(self, **kw):
        return replace(self, meta=replace(self.meta, **kw))


def _check_shape(f, X):
    if f.shape is not None and tuple(X.shape[-2:]) != tuple(f.shape):
        raise DimensionError(f"{f.name} expects trailing shape {f.shape}, got {X.shape[-2:]}")


def constant(c, shape=None):
    c = float(c)
    return TestFunction(
        lambda X: np.full(X.shape[:-2], c),
        gradient=lambda X: np.zeros_like(X),
        hessian=lambda X: np.zeros(X.shape[-2:] * 2),
        meta=FunctionMeta(holder_alpha=1.0, holder_const=0.0, bounded_sup=0.0,
                          coord_deriv_sups={1: 0.0, 2: 0.0, 3: 0.0}, frechet_sups={1: 0.0, 2: 0.0, 3: 0.0}),
        shape=shape, name=f"const({c:g})",
    )


def linear(C, name=None):
    """``h(X) = <C, X>_F``; Lipschitz with constant ``||C||_F``."""
    C = as_real_matrix(C, name="C").copy()
    C.setflags(write=False)
    fro = float(np.linalg.norm(C))
    return TestFunction(
        lambda X: np.einsum("...ij,ij->...", X, C),
        gradient=lambda X: np.broadcast_to(C, X.shape).copy(),
        hessian=lambda X: np.zeros(C.shape * 2),
        meta=FunctionMeta(holder_alpha=1.0, holder_const=fro, coord_deriv_sups={1: fro, 2: 0.0},
                          frechet_sups={1: fro, 2: 0.0}),
        shape=C.shape, name=name or "linear",
    )


def coordinate(i, j, nu, d):
    C = np.zeros((nu, d))
    C[i, j] = 1.0
    return linear(C, name=f"X[{i},{j}]")


def quadratic_probe(W, U, Psi):
    """Weighted quadratic probe ``f(X) = 1/2 tr(X^T A X U)``, ``A = Psi^{-1/2} W Psi^{-1/2}``.

    The returned function carries its exact gradient ``A X U``, its constant
    Hessian ``A_{ik} U_{lj}`` and the closed-form generator value
    ``tr(W) tr(Sigma U) - 2 f(X)`` (as ``closed_form_generator(X, Sigma)``).
    """
    W = as_real_matrix(W, name="W")
    U = as_real_matrix(U, name="U")
    Psi = as_sympd(Psi, "Psi")
    nu, d = Psi.dim, U.shape[0]
    if W.shape != (nu, nu) or U.shape != (d, d):
        raise DimensionError(f"W must be {nu}x{nu} and U must be square, got {W.shape}, {U.shape}")
    W, U = 0.5 * (W + W.T), 0.5 * (U + U.T)
    R = Psi.inv_sqrt_array()
    A = R @ W @ R
    H = np.einsum("ik,lj->ijkl", A, U)
    for arr in (A, U, H):
        arr.setflags(write=False)
    trW = float(np.trace(W))

    def value(X):
        return 0.5 * np.einsum("...ki,kl,...lj,ji->...", X, A, X, U)

    def generator(X, Sigma):
        S = np.asarray(Sigma, dtype=float)
        return trW * float(np.trace(S @ U)) - 2.0 * value(np.asarray(X, dtype=float))

    return TestFunction(value, gradient=lambda X: A @ X @ U, hessian=lambda X: H,
                        shape=(nu, d), name="quadratic_probe", closed_form_generator=generator)


def probe_family(nu, d, Psi, size, rng):
    """Seeded family of probes with random symmetric weights (trace kept away from 0)."""
    out = []
    for _ in range(size):
        G = rng.standard_normal((nu, nu))
        H = rng.standard_normal((d, d))
        W = G @ G.T / nu + 0.1 * np.eye(nu)
        U = H @ H.T / d + 0.1 * np.eye(d)
        out.append(quadratic_probe(W, U, Psi))
    return out


def _lead(X, f):
    X = np.asarray(X, dtype=float)
    if X.ndim < 2:
        raise DimensionError("X must have trailing shape (nu, d)")
    _check_shape(f, X)
    return X


def fd_gradient(F, X, step):
    """Central-difference gradient of a vectorised scalar ``F`` at a stack ``X``."""
    X = np.asarray(X, dtype=float)
    nu, d = X.shape[-2:]
    E = np.eye(nu * d).reshape(nu * d, nu, d) * step
    pts = np.stack([X[..., None, :, :] + E, X[..., None, :, :] - E], axis=-3)
    vals = F(pts)  # (..., nu*d, 2)
    return ((vals[..., 0] - vals[..., 1]) / (2 * step)).reshape(X.shape)


def fd_diffusion(F, X, Psi, Sigma, step, center=None):
    """``sum Psi_ik Sigma_jl d^2F/dX_ij dX_kl`` by second differences along the eigenvectors of ``Psi (x) Sigma``."""
    X = np.asarray(X, dtype=float)
    nu, d = X.shape[-2:]
    K = kron(Psi, Sigma)
    V = (K.eigvecs.T * step).reshape(nu * d, nu, d)
    pts = np.stack([X[..., None, :, :] + V, X[..., None, :, :] - V], axis=-3)
    vals = F(pts)
    f0 = F(X) if center is None else center
    second = (vals[..., 0] + vals[..., 1] - 2.0 * f0[..., None]) / step**2
    return second @ K.eigvals


def _diffusion_exact(f, Psi, Sigma, X):
    H = np.asarray(f.hessian(X), dtype=float)
    val = np.einsum("ik,jl,...ijkl->...", Psi.entries, Sigma.entries, H)
    return np.broadcast_to(val, X.shape[:-2])


def _generator(f, drift, Psi, Sigma, X, allow_fd, fd_step):
    if f.gradient is not None and f.hessian is not None:
        G = np.asarray(f.gradient(X), dtype=float)
        first = np.einsum("...ij,...ij->...", drift, G)
        return first + _diffusion_exact(f, Psi, Sigma, X)
    if not allow_fd:
        raise ValidationError(f"{f.name} has no gradient/Hessian and finite differences are disabled")
    G = f.gradient(X) if f.gradient is not None else fd_gradient(f, X, fd_step)
    first = np.einsum("...ij,...ij->...", drift, G)
    return first + fd_diffusion(f, X, Psi, Sigma, fd_step)


def ou_generator(f, Psi, Sigma, X, allow_fd=True, fd_step=FD_STEP):
    """Matrix normal Stein operator ``A f(X)``; ``X`` may be a stack ``(..., nu, d)``.

    Exact derivatives are used when ``f`` supplies both gradient and Hessian;
    otherwise central differences with step ``fd_step``.
    """
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    X = _lead(X, f)
    if X.shape[-2:] != (Psi.dim, Sigma.dim):
        raise DimensionError(f"X has trailing shape {X.shape[-2:]}, expected {(Psi.dim, Sigma.dim)}")
    out = _generator(f, -X, Psi, Sigma, X, allow_fd, fd_step)
    return float(out) if np.ndim(out) == 0 else out


def t_drift(params, X):
    """Langevin drift whose stationary law is the centered matrix T.

    ``b(X) = -((n+nu+d-1)/n) Psi^{1/2} (I + Psi^{-1/2} X Sigma^{-1} X^T Psi^{-1/2} / n)^{-1} Psi^{-1/2} X``
    """
    X = np.asarray(X, dtype=float)
    n, nu, d = params.n_dof, params.nu, params.d
    if X.shape[-2:] != (nu, d):
        raise DimensionError(f"X has trailing shape {X.shape[-2:]}, expected {(nu, d)}")
    Ps, Pis = params.Psi.sqrt_array(), params.Psi.inv_sqrt_array()
    Y = Pis @ X
    B = np.eye(nu) + Y @ params.Sigma.inv_array() @ np.swapaxes(Y, -1, -2) / n
    return -((n + nu + d - 1) / n) * (Ps @ np.linalg.solve(B, Y))


def langevin_t_generator(f, params, X, Psi=None, Sigma=None, allow_fd=True, fd_step=FD_STEP):
    """Matrix T Langevin operator ``tr(b(X)^T grad f) + sum Psi_ik Sigma_jl d^2 f``.

    The diffusion coefficients default to the scales of ``params``.
    """
    Psi = params.Psi if Psi is None else as_sympd(Psi, "Psi")
    Sigma = params.Sigma if Sigma is None else as_sympd(Sigma, "Sigma")
    X = _lead(X, f)
    out = _generator(f, t_drift(params, X), Psi, Sigma, X, allow_fd, fd_step)
    return float(out) if np.ndim(out) == 0 else out


def stein_identity_estimate(batch, f, Psi, Sigma):
    """Empirical mean of ``A f`` over a batch with its standard error.

    Under the matrix normal law ``N(0, Psi (x) Sigma)`` the mean is zero.
    """
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    if (batch.nu, batch.d) != (Psi.dim, Sigma.dim):
        raise DimensionError(f"batch shape {(batch.nu, batch.d)} does not match scales {(Psi.dim, Sigma.dim)}")
    vals = np.asarray(ou_generator(f, Psi, Sigma, batch.data), dtype=float).reshape(-1)
    return _mean_se(vals)


def _mean_se(vals):
    n = vals.size
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "se": se}


def check_gradient(f, rng, points=20, step=1e-5, scale=1.0):
    """Compare ``f.gradient`` with central differences at seeded points.

    Returns the largest relative error ``|g - g_fd| / max(1, |g|)`` observed.
    """
    if f.gradient is None:
        raise ValidationError(f"{f.name} has no gradient to check")
    if f.shape is None:
        raise ValidationError("check_gradient needs a TestFunction with a declared shape")
    X = scale * rng.standard_normal((points,) + tuple(f.shape))
    G = np.asarray(f.gradient(X), dtype=float)
    Gfd = fd_gradient(f, X, step)
    return float(np.max(np.abs(G - Gfd) / np.maximum(1.0, np.abs(G))))
