"""Matrix normal, Wishart and matrix T laws.

Matrices are ``nu x d``; the vectorisation used throughout is ``vec(X^T)``,
i.e. the row-major flatten ``X.reshape(-1)``, whose covariance under
``N(M, Psi (x) Sigma)`` is ``np.kron(Psi, Sigma)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DimensionError, ValidationError
from .matcore import SymPD, as_real_matrix, as_sympd
from .rng import Stream

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MatrixNormalParams:
    """Location ``M`` (nu x d), row scale ``Psi`` and column scale ``Sigma``."""

    M: np.ndarray
    Psi: SymPD
    Sigma: SymPD

    def __post_init__(self):
        Psi = as_sympd(self.Psi, "Psi")
        Sigma = as_sympd(self.Sigma, "Sigma")
        M = as_real_matrix(self.M, shape=(Psi.dim, Sigma.dim), name="M")
        M.setflags(write=False)
        object.__setattr__(self, "Psi", Psi)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "M", M)

    @classmethod
    def centered(cls, Psi, Sigma):
        Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
        return cls(np.zeros((Psi.dim, Sigma.dim)), Psi, Sigma)

    @property
    def nu(self):
        return self.Psi.dim

    @property
    def d(self):
        return self.Sigma.dim


@dataclass(frozen=True)
class MatrixTParams:
    """Centered matrix T with real degrees of freedom ``n_dof`` and scales ``Psi``, ``Sigma``."""

    n_dof: float
    Psi: SymPD
    Sigma: SymPD

    def __post_init__(self):
        if not (np.isfinite(self.n_dof) and self.n_dof > 0):
            raise ValidationError(f"n_dof must be positive, got {self.n_dof}")
        object.__setattr__(self, "n_dof", float(self.n_dof))
        object.__setattr__(self, "Psi", as_sympd(self.Psi, "Psi"))
        object.__setattr__(self, "Sigma", as_sympd(self.Sigma, "Sigma"))

    @property
    def nu(self):
        return self.Psi.dim

    @property
    def d(self):
        return self.Sigma.dim


_HEADER = struct.Struct("<4q")


@dataclass(frozen=True)
class SampleBatch:
    """``count`` matrices of shape ``(nu, d)`` with the seed that produced them.

    Binary layout: four little-endian int64 ``(count, nu, d, seed)`` followed
    by the data as row-major little-endian float64. CSV layout: a header
    ``x_1_1, x_1_2, ...`` and one ``vec(X^T)`` row per sample.
    """

    data: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] < 1:
            raise DimensionError(f"batch data must have shape (count, nu, d), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("batch has non-finite entries")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def count(self):
        return self.data.shape[0]

    @property
    def nu(self):
        return self.data.shape[1]

    @property
    def d(self):
        return self.data.shape[2]

    def vec(self):
        """``(count, nu*d)`` array of ``vec(X^T)`` rows."""
        return self.data.reshape(self.count, -1)

    def __len__(self):
        return self.count

    def to_bytes(self):
        head = _HEADER.pack(self.count, self.nu, self.d, self.seed)
        return head + self.data.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf):
        count, nu, d, seed = _HEADER.unpack_from(buf, 0)
        expected = _HEADER.size + 8 * count * nu * d
        if len(buf) != expected:
            raise ValidationError(f"binary batch has {len(buf)} bytes, header implies {expected}")
        data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(count, nu, d)
        return cls(data.astype(float), seed)

    def column_names(self):
        return [f"x_{i + 1}_{j + 1}" for i in range(self.nu) for j in range(self.d)]

    def to_csv(self):
        out = io.StringIO()
        out.write(",".join(self.column_names()) + "\n")
        np.savetxt(out, self.vec(), delimiter=",", fmt="%.17g")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text, seed=0):
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        cols = lines[0].split(",")
        idx = [tuple(int(v) for v in c.strip().split("_")[1:]) for c in cols]
        nu, d = max(i for i, _ in idx), max(j for _, j in idx)
        if len(idx) != nu * d:
            raise ValidationError("CSV header does not describe a full nu x d matrix")
        rows = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        return cls(rows.reshape(rows.shape[0], nu, d), seed)

    def save(self, path):
        path = str(path)
        if path.endswith(".csv"):
            with open(path, "w", newline="") as fh:
                fh.write(self.to_csv())
        else:
            with open(path, "wb") as fh:
                fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, seed=0):
        path = str(path)
        if path.endswith(".csv"):
            with open(path) as fh:
                return cls.from_csv(fh.read(), seed)
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def standard_normal_matrices(seed, count, nu, d, *tag, start=0, threads=None):
    """Iid standard normal ``(count, nu, d)`` array from the ``(seed, *tag)`` stream."""
    tag = tag or ("mn",)
    z = Stream(seed, *tag).normal(count, nu * d, start=start, threads=threads)
    return z.reshape(count, nu, d)


def sample_matrix_normal(params, count, seed, threads=None):
    """Draw ``M + Psi^{1/2} Z Sigma^{1/2}`` for ``count`` iid standard normal ``Z``.

    Parameters
    ----------
    params : MatrixNormalParams
    count : int
    seed : int
        Sample ``k`` depends only on ``(seed, k)``.
    threads : int, optional
        Worker cap for generation; output does not depend on it.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    Z = standard_normal_matrices(seed, count, params.nu, params.d, "mn", threads=threads)
    X = params.M + params.Psi.sqrt_array() @ Z @ params.Sigma.sqrt_array()
    return SampleBatch(X, seed)


def log_density_matrix_normal(params, X):
    X = as_real_matrix(X, shape=(params.nu, params.d))
    nu, d = params.nu, params.d
    R = X - params.M
    quad = np.trace(params.Sigma.inv_array() @ R.T @ params.Psi.inv_array() @ R)
    return float(-0.5 * nu * d * _LOG_2PI - 0.5 * d * params.Psi.logdet()
                 - 0.5 * nu * params.Sigma.logdet() - 0.5 * quad)


def wishart_batch(dim, alpha, count, seed, *tag, threads=None):
    """``count`` Bartlett draws from ``Wishart_dim(alpha, I)``, shape ``(count, dim, dim)``.

    The lower factor has ``sqrt(chi2(alpha - i))`` on the diagonal and standard
    normals below it; the chi-square uses the gamma inverse CDF so real
    ``alpha > dim - 1`` is allowed.
    """
    if not alpha > dim - 1:
        raise ValidationError(f"Wishart needs alpha > dim - 1, got alpha={alpha}, dim={dim}")
    tag = tag or ("wishart",)
    n_off = dim * (dim - 1) // 2
    u = Stream(seed, *tag).uniform(count, dim + n_off, threads=threads)
    dofs = alpha - np.arange(dim)
    T = np.zeros((count, dim, dim))
    ii = np.arange(dim)
    T[:, ii, ii] = np.sqrt(2.0 * special.gammaincinv(0.5 * dofs, u[:, :dim]))
    if n_off:
        rows, cols = np.tril_indices(dim, -1)
        T[:, rows, cols] = special.ndtri(u[:, dim:])
    return T @ np.swapaxes(T, -1, -2)


def sample_wishart(dim, alpha, seed):
    """A single ``Wishart_dim(alpha, I)`` draw as a SymPD."""
    return SymPD(wishart_batch(dim, alpha, 1, seed)[0])


def _inv_sqrt_batch(W):
    w, V = np.linalg.eigh(W)
    return (V / np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def sample_matrix_t(params, count, seed, threads=None):
    """Draw ``Psi^{1/2} (sqrt(n) Z W^{-1/2}) Sigma^{1/2}`` with ``W ~ Wishart_d(n+d-1, I)``."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    n, nu, d = params.n_dof, params.nu, params.d
    Z = standard_normal_matrices(seed, count, nu, d, "mt-z", threads=threads)
    W = wishart_batch(d, n + d - 1, count, seed, "mt-w", threads=threads)
    Y = np.sqrt(n) * Z @ _inv_sqrt_batch(W)
    X = params.Psi.sqrt_array() @ Y @ params.Sigma.sqrt_array()
    return SampleBatch(X, seed)


def log_density_matrix_t(params, X):
    X = as_real_matrix(X, shape=(params.nu, params.d))
    n, nu, d = params.n_dof, params.nu, params.d
    A = np.eye(nu) + params.Psi.inv_array() @ X @ params.Sigma.inv_array() @ X.T / n
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise ValidationError("determinant term is not positive")
    a = 0.5 * (n + nu + d - 1)
    return float(_lmgamma(a, nu) - _lmgamma(0.5 * (n + nu - 1), nu) - a * logdet
                 - 0.5 * nu * d * np.log(np.pi * n)
                 - 0.5 * d * params.Psi.logdet() - 0.5 * nu * params.Sigma.logdet())


def _lmgamma(a, p):
    # log Gamma_p(a) = p(p-1)/4 log(pi) + sum_j log Gamma(a - j/2)
    j = np.arange(p)
    return 0.25 * p * (p - 1) * np.log(np.pi) + float(np.sum(special.gammaln(a - 0.5 * j)))


def inv_wishart_trace_moments(dim, alpha):
    """Trace moments of ``W^{-1}`` for ``W ~ Wishart_dim(alpha, I)``.

    Returns a dict with ``m1 = E tr(W^-1)`` when ``alpha > dim + 1`` and, when
    ``alpha > dim + 3``, ``m2tr = E tr(W^-2)`` and ``m1sq = E tr(W^-1)^2``.
    """
    d, a = int(dim), float(alpha)
    if d < 1 or not a > d - 1:
        raise ValidationError(f"invalid Wishart parameters dim={dim}, alpha={alpha}")
    if not a > d + 1:
        raise ValidationError(f"E tr(W^-1) needs alpha > dim + 1, got alpha={alpha}")
    out = {"m1": d / (a - d - 1)}
    if a > d + 3:
        den = (a - d) * (a - d - 1) * (a - d - 3)
        out["m2tr"] = ((a - d - 1) * d + d * d) / den
        out["m1sq"] = ((a - d - 2) * d * d + 2 * d) / den
    return out


def matrix_t_frobenius_moments(nu, d, n_dof):
    """Moments of ``||Y||_F^2`` for the standardised matrix T ``Y = Psi^{-1/2} X Sigma^{-1/2}``.

    Returns ``m2 = E||Y||^2`` (needs ``n > 2``) with its bound ``m2_bound = 2 nu d``
    and, when ``n > 4``, ``m4 = E||Y||^4`` with ``m4_bound = 6 (nu d)^2 / (1 - 4/n)``.
    The bound ``m2 <= 2 nu d`` is only valid for ``n >= 4``.
    """
    n = float(n_dof)
    if not n > 2:
        raise ValidationError(f"second Frobenius moment needs n_dof > 2, got {n_dof}")
    k = nu * d
    out = {"m2": k / (1.0 - 2.0 / n), "m2_bound": 2.0 * k}
    if n > 4:
        num = (2 * nu * ((1 - 2 / n) * d + d * d / n)
               + nu * nu * ((1 - 3 / n) * d * d + 2 * d / n))
        out["m4"] = num / ((1 - 1 / n) * (1 - 2 / n) * (1 - 4 / n))
        out["m4_bound"] = 6.0 * k * k / (1.0 - 4.0 / n)
    return out

