"""Semigroup solution of the matrix normal Stein equation and regularity checks.

With ``u = e^{-t}`` and ``s = sqrt(1 - u^2)`` the solution reads

    f_h(X) = -int_0^1 (E h(u X + s Y) - E h(Y)) / u du,     Y ~ N(0, Psi (x) Sigma),

and both the ``u`` integral (Gauss-Legendre) and the inner expectation use
one fixed set of Gaussian draws ``Y_z`` for every ``X``. Writing the
estimator as the mean over ``z`` of

    phi_z(X) = -sum_q w_q (h(u_q X + s_q Y_z) - h(Y_z)) / u_q

gives ``f_h`` as a smooth deterministic function of ``X`` together with a
per-point standard error ``std(phi_z) / sqrt(N)``. The difference quotient
stays bounded at ``u -> 0`` for Lipschitz ``h``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import qmc

from .errors import UncertifiedFunctionError, ValidationError
from .matcore import SymPD, as_sympd, kron
from .rng import Stream, default_rng, resolve_threads
from .stein import fd_gradient

GRAD_STEP = 1e-5
HESS_STEP = 1e-3
_CHUNK_ELEMS = 1 << 14


@dataclass(frozen=True)
class QuadratureConfig:
    """Discretisation of the time integral defining ``f_h``.

    Attributes
    ----------
    t_nodes : int
        Gauss-Legendre nodes in ``u = e^{-t}`` on (0, 1); at least 8.
    mc_inner : int
        Number of common Gaussian draws; at least 256.
    seed : int
    inner : {"sobol", "mc"}
        ``"sobol"`` uses a scrambled Sobol' point set mapped through the normal
        quantile (randomised QMC), ``"mc"`` plain counter-stream draws. The
        reported standard errors are the iid formula in both cases, which is
        conservative for the QMC set.
    substitution : str
        Only ``"u_exp"``.
    """

    t_nodes: int = 64
    mc_inner: int = 4096
    seed: int = 0
    inner: str = "sobol"
    substitution: str = "u_exp"

    def __post_init__(self):
        if self.t_nodes < 8:
            raise ValidationError(f"configuration too coarse: t_nodes={self.t_nodes} < 8")
        if self.mc_inner < 256:
            raise ValidationError(f"configuration too coarse: mc_inner={self.mc_inner} < 256")
        if self.inner not in ("sobol", "mc"):
            raise ValidationError(f"inner must be 'sobol' or 'mc', got {self.inner!r}")
        if self.substitution != "u_exp":
            raise ValidationError("only the u = exp(-t) substitution is supported")
        if self.seed is None:
            raise ValidationError("seeds mandatory")

    def refined(self, factor=2):
        return QuadratureConfig(self.t_nodes * factor, self.mc_inner * factor, self.seed, self.inner)


def _inner_normals(config, k):
    n = config.mc_inner
    if config.inner == "mc":
        return Stream(config.seed, "stein").normal(n, k)
    with warnings.catch_warnings():
        # non power-of-two sizes lose the balance property but stay valid
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(d=k, scramble=True, seed=default_rng(config.seed, "stein-sobol")).random(n)
    eps = 2.0**-54
    return special.ndtri(np.clip(u, eps, 1.0 - eps))


@dataclass(frozen=True, eq=False)
class SteinSolution:
    """``f_h`` represented by quadrature nodes and a fixed set of Gaussian draws.

    Call it (or :meth:`value`) on a matrix or a stack ``(..., nu, d)``.
    """

    h: object
    Psi: SymPD
    Sigma: SymPD
    config: QuadratureConfig
    h_mean: float
    h_mean_se: float
    _u: np.ndarray = field(repr=False)
    _w: np.ndarray = field(repr=False)
    _YT: np.ndarray = field(repr=False)
    _hY: np.ndarray = field(repr=False)
    threads: int = 1

    @property
    def shape(self):
        return (self.Psi.dim, self.Sigma.dim)

    def _phi(self, X):
        """``(P, N)`` per-draw integrand sums for a flat stack ``X`` of P points.

        Uses ``phi_z = -sum_q (w_q/u_q) h(u_q X + s_q Y_z) + (sum_q w_q/u_q) h(Y_z)``;
        the loop runs over nodes outermost so ``s_q Y`` is formed once per node.
        """
        # draws live on the last axis so the broadcast add has a long inner loop
        YT = self._YT
        P, N = X.shape[0], YT.shape[-1]
        step = max(1, _CHUNK_ELEMS // N)
        chunks = [slice(a, min(a + step, P)) for a in range(0, P, step)]
        out = np.zeros((P, N))
        X = X[..., None]
        for u, w in zip(self._u, self._w):
            sY = math.sqrt(1.0 - u * u) * YT
            uX = u * X
            c = w / u
            for sl in chunks:
                out[sl] -= c * self.h(np.moveaxis(uX[sl] + sY, -1, 1))
        out += float(np.sum(self._w / self._u)) * self._hY
        return out

    def _phi_chunked(self, X):
        threads = resolve_threads(self.threads)
        P = X.shape[0]
        if threads == 1 or P < 2 * threads:
            return self._phi(X)
        edges = np.linspace(0, P, threads + 1).astype(int)
        parts = [X[a:b] for a, b in zip(edges[:-1], edges[1:])]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.concatenate(list(pool.map(self._phi, parts)))

    def value_and_se(self, X):
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-2]
        phi = self._phi_chunked(X.reshape((-1,) + self.shape))
        N = phi.shape[1]
        f = phi.mean(axis=1)
        se = phi.std(axis=1, ddof=1) / math.sqrt(N)
        return f.reshape(lead), se.reshape(lead)

    def value(self, X):
        X = np.asarray(X, dtype=float)
        out = self.value_and_se(X)[0]
        return float(out) if out.ndim == 0 else out

    __call__ = value

    def gradient(self, X, method="fd", step=GRAD_STEP):
        """``grad f_h``: central differences (default) or the exact route.

        ``method="exact"`` uses ``grad f_h(X) = -int_0^1 E grad h(uX + sY) du`` and
        needs ``h.gradient``.
        """
        X = np.asarray(X, dtype=float)
        if method == "fd":
            return fd_gradient(lambda Z: self.value_and_se(Z)[0], X, step)
        if method != "exact":
            raise ValidationError(f"unknown gradient method {method!r}")
        if self.h.gradient is None:
            raise ValidationError("exact gradient needs h.gradient")
        flat = X.reshape((-1,) + self.shape)
        G = np.zeros_like(flat)
        for u, w in zip(self._u, self._w):
            s = math.sqrt(1.0 - u * u)
            pts = np.moveaxis(u * flat[..., None] + s * self._YT, -1, 1)
            G -= w * np.asarray(self.h.gradient(pts)).mean(axis=1)
        return G.reshape(X.shape)

    def generator(self, X, grad_step=GRAD_STEP, hess_step=HESS_STEP):
        """``A f_h(X)`` by central differences of ``f_h``.

        ``-tr(X^T grad f)`` is the derivative along ``X`` itself (one central
        difference of length ``grad_step`` in the direction ``X / ||X||_F``); the
        second-order term uses :func:`fd_diffusion` with ``hess_step``. All
        stencil points are evaluated in a single pass.
        """
        X = np.asarray(X, dtype=float)
        nu, d = self.shape
        K = kron(self.Psi, self.Sigma)
        r = np.sqrt(np.einsum("...ij,...ij->...", X, X))[..., None, None]
        D = grad_step * X / np.where(r > 0, r, 1.0)
        V = (K.eigvecs.T * hess_step).reshape(nu * d, nu, d)
        Xe = X[..., None, :, :]
        pts = np.concatenate([Xe, Xe + D[..., None, :, :], Xe - D[..., None, :, :], Xe + V, Xe - V], axis=-3)
        vals = self.value_and_se(pts)[0]
        f0, fp, fm = vals[..., 0], vals[..., 1], vals[..., 2]
        k = nu * d
        first = -(fp - fm) / (2 * grad_step) * r[..., 0, 0]
        second = (vals[..., 3:3 + k] + vals[..., 3 + k:] - 2.0 * f0[..., None]) / hess_step**2
        return first + second @ K.eigvals


def gauss_legendre_unit(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def solve_stein(h, Psi, Sigma, config=None, threads=None):
    """Solve ``A f = h - E h(Z)`` for ``Z ~ N(0, Psi (x) Sigma)``.

    Parameters
    ----------
    h : TestFunction
        Must declare ``meta.holder_alpha``.
    Psi, Sigma : SymPD or array_like
    config : QuadratureConfig, optional

    Returns
    -------
    SteinSolution
    """
    config = QuadratureConfig() if config is None else config
    if h.meta.holder_alpha is None:
        raise UncertifiedFunctionError(f"{h.name}: solve_stein needs meta.holder_alpha")
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    nu, d = Psi.dim, Sigma.dim
    Z = _inner_normals(config, nu * d).reshape(-1, nu, d)
    Y = Psi.sqrt_array() @ Z @ Sigma.sqrt_array()
    hY = np.asarray(h(Y), dtype=float)
    if not np.all(np.isfinite(hY)):
        raise ValidationError(f"{h.name} returned non-finite values")
    u, w = gauss_legendre_unit(config.t_nodes)
    YT = np.ascontiguousarray(np.moveaxis(Y, 0, -1))
    for arr in (u, w, YT, hY):
        arr.setflags(write=False)
    h_mean = float(hY.mean())
    h_se = float(hY.std(ddof=1) / math.sqrt(hY.size))
    return SteinSolution(h, Psi, Sigma, config, h_mean, h_se, u, w, YT, hY,
                         threads=resolve_threads(threads))


def stein_residual(sol, X):
    """``A f_h(X) - (h(X) - E h)`` with ``A f_h`` from finite differences of ``f_h``."""
    X = np.asarray(X, dtype=float)
    out = sol.generator(X) - (np.asarray(sol.h(X), dtype=float) - sol.h_mean)
    return float(out) if np.ndim(out) == 0 else out


def resolvent_rhs(sol, X, outer=256, nodes=16, seed=0):
    """Resolvent form ``int_0^inf e^{-t} E[f_h(X_t) + E h - h(X_t) | X_0 = X] dt``.

    ``X_t`` is sampled from the exact OU transition; with ``u = e^{-t}`` the
    integral is over (0, 1) with unit weight. Returns ``(value, se)`` where the
    standard error combines the outer sampling error of every node.
    """
    X = np.asarray(X, dtype=float)
    nu, d = sol.shape
    u, w = gauss_legendre_unit(nodes)
    Z = Stream(seed, "resolvent").normal(nodes * outer, nu * d).reshape(nodes, outer, nu, d)
    E = sol.Psi.sqrt_array() @ Z @ sol.Sigma.sqrt_array()
    s = np.sqrt(1.0 - u * u)[:, None, None, None]
    Xt = u[:, None, None, None] * X + s * E
    g = sol.value(Xt) + sol.h_mean - np.asarray(sol.h(Xt), dtype=float)
    means = g.mean(axis=1)
    var = g.var(axis=1, ddof=1) / outer
    return float(w @ means), float(math.sqrt(w**2 @ var))


# ---- regularity bounds -------------------------------------------------------

_KINDS = ("coord_m", "coord_bounded", "coord_mixed", "frechet_m", "frechet_bounded", "frechet_mixed")


def gamma_ratio(m):
    """``Gamma(m/2) / (sqrt(2) Gamma(m/2 + 1/2))``."""
    return math.exp(math.lgamma(m / 2) - math.lgamma(m / 2 + 0.5)) / math.sqrt(2.0)


def _need(value, what, h):
    if value is None:
        raise UncertifiedFunctionError(f"{h.name}: missing metadata {what}")
    return value


def _anisotropy(Psi, Sigma, index=None):
    a = np.sqrt(np.outer(np.diag(Psi.inv_array()), np.diag(Sigma.inv_array())))
    if index is None:
        return float(a.max())
    return float(a[tuple(index)])


def regularity_bound_rhs(kind, m, h, Psi, Sigma, indices=None):
    """Right-hand side of the derivative bounds for the Stein solution ``f_h``.

    Parameters
    ----------
    kind : str
        ``coord_m``: ``(1/m) c_m``; ``coord_bounded``: ``sqrt(pi/2) a_ij ||h - Eh||``;
        ``coord_mixed``: ``gamma_ratio(m) min_k a_{i_k j_k} c_{m-1}``; the
        ``frechet_*`` kinds use ``M_k(h)`` and ``||Psi^{-1/2}||_2 ||Sigma^{-1/2}||_2``
        in place of ``c_k`` and ``a``. Here ``a_ij = sqrt((Psi^-1)_ii (Sigma^-1)_jj)``
        and ``c_k = meta.coord_deriv_sups[k]``.
    m : int
        Derivative order of ``f_h``.
    indices : sequence of (i, j), optional
        Index tuple for the coordinate kinds. ``coord_bounded`` uses the first
        pair; when omitted the bound is maximised over all tuples.
    """
    if kind not in _KINDS:
        raise ValidationError(f"unknown bound kind {kind!r}")
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    m = int(m)
    if m < 1 or (kind.endswith("mixed") and m < 2):
        raise ValidationError(f"order m={m} not allowed for {kind}")
    meta = h.meta
    if kind == "coord_m":
        return _need(meta.coord_deriv_sups.get(m), f"coord_deriv_sups[{m}]", h) / m
    if kind == "frechet_m":
        return _need(meta.frechet_sups.get(m), f"frechet_sups[{m}]", h) / m
    if kind == "coord_bounded":
        b = _need(meta.bounded_sup, "bounded_sup", h)
        idx = None if indices is None else indices[0]
        return math.sqrt(math.pi / 2) * _anisotropy(Psi, Sigma, idx) * b
    inv_norm = Psi.eigvals[-1] ** -0.5 * Sigma.eigvals[-1] ** -0.5
    if kind == "frechet_bounded":
        return math.sqrt(math.pi / 2) * inv_norm * _need(meta.bounded_sup, "bounded_sup", h)
    if kind == "frechet_mixed":
        return gamma_ratio(m) * inv_norm * _need(meta.frechet_sups.get(m - 1), f"frechet_sups[{m - 1}]", h)
    c = _need(meta.coord_deriv_sups.get(m - 1), f"coord_deriv_sups[{m - 1}]", h)
    if indices is None:
        a = _anisotropy(Psi, Sigma)
    else:
        if len(indices) != m:
            raise ValidationError(f"coord_mixed with m={m} needs {m} index pairs")
        a = min(_anisotropy(Psi, Sigma, ij) for ij in indices)
    return gamma_ratio(m) * a * c


def grid_points(Psi, Sigma, count, seed, radius=None):
    """Seeded points uniform in the Frobenius ball of radius ``4 * ||Psi (x) Sigma||_2``."""
    nu, d = Psi.dim, Sigma.dim
    if radius is None:
        radius = 4.0 * kron(Psi, Sigma).spectral_norm()
    rng = default_rng(seed, "grid")
    G = rng.standard_normal((count, nu * d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(count, 1)) ** (1.0 / (nu * d))
    return (G * r).reshape(count, nu, d)


def frechet_lower_estimate(sol, X, order, directions=200, seed=0, step=None):
    """Lower estimate of ``M_order(f_h)`` over points ``X`` and random unit directions.

    The directional derivatives ``D^k f_h(X)[U_1, ..., U_k]`` are central
    differences of the common-random-number ``f_h``; the returned maximum can
    only undershoot the true supremum (up to discretisation error).
    """
    X = np.asarray(X, dtype=float).reshape((-1,) + sol.shape)
    rng = default_rng(seed, "frechet", order)
    nu, d = sol.shape

    def unit(k):
        U = rng.standard_normal((k, nu, d))
        return U / np.linalg.norm(U.reshape(k, -1), axis=1)[:, None, None]

    F = lambda Z: sol.value_and_se(Z)[0]  # noqa: E731
    if order == 1:
        step = GRAD_STEP if step is None else step
        U = unit(directions)
        pts = X[:, None, None] + step * np.stack([U, -U], axis=1)[None]
        v = F(pts)
        D = (v[:, 0] - v[:, 1]) / (2 * step)
    elif order == 2:
        step = HESS_STEP if step is None else step
        U1, U2 = unit(directions), unit(directions)
        signs = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
        pts = np.stack([X[:, None] + step * (a * U1 + b * U2)[None] for a, b in signs], axis=2)
        v = F(pts)
        D = (v[..., 0] - v[..., 1] - v[..., 2] + v[..., 3]) / (4 * step * step)
    else:
        raise ValidationError("Frechet estimates are implemented for orders 1 and 2 only")
    return float(np.max(np.abs(D)))


def holder_solution_bound(h, X, frob_moment):
    """``alpha^{-1} [h]_alpha (E ||X_inf||_F^alpha + ||X||_F^alpha)`` pointwise."""
    a = _need(h.meta.holder_alpha, "holder_alpha", h)
    c = _need(h.meta.holder_const, "holder_const", h)
    X = np.asarray(X, dtype=float)
    r = np.sqrt(np.einsum("...ij,...ij->...", X, X))
    return c / a * (frob_moment + r**a)
