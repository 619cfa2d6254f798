"""Dense small-dimension matrix primitives.

Everything here works on plain ``numpy`` arrays except :class:`SymPD`, an
immutable symmetric positive-definite matrix carrying its spectral
decomposition so that square roots, inverse roots and log-determinants are
computed once and reused.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DimensionError, NotPositiveDefiniteError, ValidationError

DEFAULT_DIM_CAP = 64
SYMMETRY_RTOL = 1e-12
CONDITION_FLOOR = 1e-12


def sym(A):
    """Symmetric part ``(A + A^T) / 2`` of a square array (or stack)."""
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def as_real_matrix(X, shape=None, name="X"):
    """Validate and return ``X`` as a finite 2-D float array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    if X.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got ndim={X.ndim}")
    if shape is not None and X.shape != tuple(shape):
        raise DimensionError(f"{name} has shape {X.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} has non-finite entries")
    return X


class SymPD:
    """Symmetric positive-definite matrix with cached eigendecomposition.

    Parameters
    ----------
    entries : array_like, shape (n, n)
        Must be symmetric to within ``1e-12`` relative Frobenius error; the
        symmetric part is stored.

    Raises
    ------
    NotPositiveDefiniteError
        If the smallest eigenvalue is not above ``1e-12`` times the largest.
    """

    __slots__ = ("_entries", "_eigvals", "_eigvecs", "_cache")

    def __init__(self, entries):
        A = np.asarray(entries, dtype=float)
        if A.ndim == 0:
            A = A.reshape(1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"SymPD needs a square matrix, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise NotPositiveDefiniteError("SymPD entries must be finite")
        scale = np.linalg.norm(A)
        if np.linalg.norm(A - A.T) > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
            raise NotPositiveDefiniteError("matrix is not symmetric to within 1e-12 relative")
        A = sym(A)
        w, V = np.linalg.eigh(A)
        w, V = w[::-1], V[:, ::-1]
        self._init(A, w, V)

    def _init(self, A, w, V):
        if not (w[-1] > 0 and w[-1] > CONDITION_FLOOR * w[0]):
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite (min eigenvalue {w[-1]:.3g}, max {w[0]:.3g})"
            )
        for arr in (A, w, V):
            arr.setflags(write=False)
        self._entries = A
        self._eigvals = w
        self._eigvecs = V
        self._cache = {}

    @classmethod
    def _from_eig(cls, entries, eigvals, eigvecs):
        obj = cls.__new__(cls)
        obj._init(np.array(entries, dtype=float), np.array(eigvals, dtype=float),
                  np.array(eigvecs, dtype=float))
        return obj

    @classmethod
    def identity(cls, dim):
        return cls._from_eig(np.eye(dim), np.ones(dim), np.eye(dim))

    @classmethod
    def diag(cls, values):
        values = np.asarray(values, dtype=float)
        order = np.argsort(-values, kind="stable")
        return cls._from_eig(np.diag(values), values[order], np.eye(len(values))[:, order])

    @property
    def dim(self):
        return self._entries.shape[0]

    @property
    def entries(self):
        return self._entries

    @property
    def eigvals(self):
        return self._eigvals

    @property
    def eigvecs(self):
        return self._eigvecs

    def __array__(self, dtype=None, copy=None):
        return np.array(self._entries, dtype=dtype)

    def __repr__(self):
        return f"SymPD(dim={self.dim}, eigvals=[{self._eigvals[-1]:.4g} .. {self._eigvals[0]:.4g}])"

    def power(self, p):
        """``S**p`` through the spectrum; results for p in {1/2, -1/2, -1} are cached."""
        key = float(p)
        out = self._cache.get(key)
        if out is None:
            V = self._eigvecs
            out = (V * self._eigvals**p) @ V.T
            out = sym(out)
            out.setflags(write=False)
            self._cache[key] = out
        return out

    def sqrt_array(self):
        return self.power(0.5)

    def inv_sqrt_array(self):
        return self.power(-0.5)

    def inv_array(self):
        return self.power(-1.0)

    def logdet(self):
        return float(np.sum(np.log(self._eigvals)))

    def trace(self):
        return float(np.trace(self._entries))

    def spectral_norm(self):
        return float(self._eigvals[0])

    def scaled(self, c):
        """``c * S`` for ``c > 0`` keeping the spectral data exact."""
        if not c > 0:
            raise ValidationError("scale factor must be positive")
        return SymPD._from_eig(c * self._entries, c * self._eigvals, self._eigvecs)


def as_sympd(S, name="matrix"):
    if isinstance(S, SymPD):
        return S
    try:
        return SymPD(S)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(f"{name}: {exc}") from None


def sym_sqrt(S):
    """Symmetric positive-definite square root of ``S``."""
    S = as_sympd(S)
    w = np.sqrt(S.eigvals)
    return SymPD._from_eig(S.sqrt_array().copy(), w, S.eigvecs)


def kron(A, B, max_dim=DEFAULT_DIM_CAP):
    """Kronecker product of two SymPD matrices.

    The spectrum of the result is assembled from the products of the factor
    spectra rather than recomputed.
    """
    A, B = as_sympd(A), as_sympd(B)
    n = A.dim * B.dim
    if n > max_dim:
        raise DimensionError(f"Kronecker dimension {n} exceeds cap {max_dim}")
    entries = np.kron(A.entries, B.entries)
    vals = np.outer(A.eigvals, B.eigvals).ravel()
    vecs = np.kron(A.eigvecs, B.eigvecs)
    order = np.argsort(-vals, kind="stable")
    return SymPD._from_eig(entries, vals[order], vecs[:, order])


class Norms(NamedTuple):
    frobenius: float
    spectral: float


def norms(A):
    """Frobenius and spectral norms of a real matrix."""
    A = as_real_matrix(A, name="A")
    if A.size == 0 or not np.any(A):
        return Norms(0.0, 0.0)
    return Norms(float(np.linalg.norm(A, "fro")), float(np.linalg.norm(A, 2)))


def random_sympd(dim, rng, cond=10.0):
    """Random SymPD with eigenvalues log-uniform in ``[1, cond]`` (test helper)."""
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    Q = Q * np.sign(np.diag(R))
    w = np.exp(rng.uniform(0.0, np.log(cond), size=dim))
    return SymPD(sym((Q * w) @ Q.T))
