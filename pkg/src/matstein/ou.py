"""Two-sided matrix Ornstein-Uhlenbeck diffusion.

    dX_t = -X_t dt + sqrt(2) Psi^{1/2} dB_t Sigma^{1/2}

Given ``X_0 = X`` the law at time ``t`` is ``N(e^{-t} X, (1 - e^{-2t}) Psi (x) Sigma)``
and ``N(0, Psi (x) Sigma)`` is stationary. Noise for step ``k`` of path ``p``
comes from ``Stream(seed, "ou", k)`` element ``p``, so paths are reproducible
individually and two runs with the same seed are synchronously coupled.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .distributions import SampleBatch, standard_normal_matrices
from .errors import DimensionError, ValidationError
from .matcore import as_sympd
from .rng import default_rng

SCHEMES = ("exact", "euler")


@dataclass(frozen=True)
class OUConfig:
    """Scales, step, horizon, scheme and seed of a simulation."""

    Psi: object
    Sigma: object
    horizon: float = 1.0
    dt: float = 1e-3
    scheme: str = "euler"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "Psi", as_sympd(self.Psi, "Psi"))
        object.__setattr__(self, "Sigma", as_sympd(self.Sigma, "Sigma"))
        if self.seed is None:
            raise ValidationError("seeds mandatory: OUConfig needs an integer seed")
        if not (self.dt > 0 and self.horizon > 0):
            raise ValidationError("dt and horizon must be positive")
        if self.dt > self.horizon or self.dt > 0.1:
            raise ValidationError(f"dt={self.dt} must satisfy dt <= horizon and dt <= 0.1")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    @property
    def steps(self):
        k = int(round(self.horizon / self.dt))
        return max(k, 1)

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.dt

    @property
    def shape(self):
        return (self.Psi.dim, self.Sigma.dim)


@dataclass(frozen=True)
class OUPath:
    """States at grid times; ``states`` has shape ``(len(times), [paths,] nu, d)``."""

    times: np.ndarray
    states: np.ndarray

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k):
        return self.states[k]

    def to_csv(self, path_index=None):
        """CSV with columns ``time, entry_11, ..., entry_{nu d}`` (one path)."""
        S = self.states
        if S.ndim == 4:
            if path_index is None:
                raise ValidationError("multi-path export needs a path_index")
            S = S[:, path_index]
        nu, d = S.shape[-2:]
        cols = ["time"] + [f"entry_{i + 1}_{j + 1}" for i in range(nu) for j in range(d)]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        rows = np.column_stack([self.times, S.reshape(len(self.times), -1)])
        np.savetxt(buf, rows, delimiter=",", fmt="%.17g")
        return buf.getvalue()


def _check_X0(X0, shape):
    X0 = np.asarray(X0, dtype=float)
    if X0.shape[-2:] != shape:
        raise DimensionError(f"X0 has shape {X0.shape}, expected (..., {shape[0]}, {shape[1]})")
    if not np.all(np.isfinite(X0)):
        raise ValidationError("X0 must be finite")
    return X0


def exact_transition_sample(X0, t, Psi, Sigma, count, seed, threads=None):
    """Draw ``e^{-t} X0 + sqrt(1 - e^{-2t}) Psi^{1/2} Z Sigma^{1/2}``.

    ``X0`` is a single ``nu x d`` matrix or a batch of ``count`` starting
    points (pushing a batch forward). At ``t = 0`` the starting points are
    returned unchanged.
    """
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    if isinstance(X0, SampleBatch):
        X0 = X0.data
    X0 = _check_X0(X0, (Psi.dim, Sigma.dim))
    if X0.ndim == 3 and X0.shape[0] != count:
        raise DimensionError(f"batch of {X0.shape[0]} starting points for count={count}")
    if t < 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    if t == 0:
        return SampleBatch(np.broadcast_to(X0, (count,) + X0.shape[-2:]).copy(), seed)
    Z = standard_normal_matrices(seed, count, Psi.dim, Sigma.dim, "ou-exact", threads=threads)
    noise = Psi.sqrt_array() @ Z @ Sigma.sqrt_array()
    return SampleBatch(np.exp(-t) * X0 + np.sqrt(-np.expm1(-2.0 * t)) * noise, seed)


def simulate(X0, config, paths=1, zero_noise=False, keep_path=True, threads=None):
    """Run ``paths`` copies on the grid with the configured scheme.

    Euler:  X_{k+1} = (1 - dt) X_k + sqrt(2 dt) Psi^{1/2} G_k Sigma^{1/2}
    exact:  X_{k+1} = e^{-dt} X_k + sqrt(1 - e^{-2dt}) Psi^{1/2} G_k Sigma^{1/2}

    Returns an :class:`OUPath`; with ``keep_path=False`` only the terminal
    state is stored (``states`` of length 1, ``times = [horizon]``).
    """
    nu, d = config.shape
    X = np.broadcast_to(_check_X0(X0, (nu, d)), (paths, nu, d)).astype(float, copy=True)
    if config.scheme == "euler":
        a, b = 1.0 - config.dt, np.sqrt(2.0 * config.dt)
    else:
        a, b = np.exp(-config.dt), np.sqrt(-np.expm1(-2.0 * config.dt))
    R, C = config.Psi.sqrt_array(), config.Sigma.sqrt_array()
    n = config.steps
    out = [X.copy()] if keep_path else None
    for k in range(n):
        if zero_noise:
            X = a * X
        else:
            G = standard_normal_matrices(config.seed, paths, nu, d, "ou", k, threads=threads)
            X = a * X + b * (R @ G @ C)
        if keep_path:
            out.append(X)
    if keep_path:
        return OUPath(config.times, np.stack(out)[:, 0] if paths == 1 else np.stack(out))
    return OUPath(np.array([n * config.dt]), X[None, 0] if paths == 1 else X[None])


def euler_path(X0, config, zero_noise=False):
    """Single Euler-Maruyama path on the grid ``0, dt, ..., horizon``."""
    if config.scheme != "euler":
        config = OUConfig(config.Psi, config.Sigma, config.horizon, config.dt, "euler", config.seed)
    return simulate(X0, config, zero_noise=zero_noise)


def terminal_batch(X0, config, paths, threads=None):
    """Terminal states of ``paths`` independent paths as a SampleBatch."""
    res = simulate(X0, config, paths=paths, keep_path=False, threads=threads)
    return SampleBatch(res.states[0].reshape(paths, *config.shape), config.seed)


@dataclass(frozen=True)
class ContractionReport:
    max_dev: float
    times: np.ndarray
    devs: np.ndarray
    scheme: str

    def to_dict(self):
        return {"max_dev": self.max_dev, "scheme": self.scheme,
                "times": self.times.tolist(), "devs": self.devs.tolist()}


def coupled_contraction(X0, Y0, config):
    """Synchronously coupled paths from ``X0`` and ``Y0``.

    Reports ``max_k ||(X_k - Y_k) - r_k (X0 - Y0)||_F`` with ``r_k = e^{-t_k}``.
    For the Euler scheme the difference follows ``(1 - dt)^k`` exactly, so the
    deviation measures ``|(1 - dt)^k - e^{-t_k}| ||X0 - Y0||_F``.
    """
    X0 = _check_X0(X0, config.shape)
    Y0 = _check_X0(Y0, config.shape)
    if X0.shape != Y0.shape:
        raise DimensionError("X0 and Y0 must have equal shapes")
    px = simulate(X0, config)
    py = simulate(Y0, config)
    t = config.times
    D = px.states - py.states
    target = np.exp(-t)[:, None, None] * (X0 - Y0)
    devs = np.linalg.norm((D - target).reshape(len(t), -1), axis=1)
    return ContractionReport(float(devs.max()), t, devs, config.scheme)


def hk_lower_estimate(batchA, batchB, alpha, family_size=64, seed=0, anchors=None, with_se=False):
    """Lower estimate of the alpha-Holder-Kantorovich distance between two batches.

    The family is ``h_A(X) = ||X - A||_F^alpha`` (Holder seminorm 1) for
    ``family_size`` anchors drawn with ``seed`` from the union of both batches.
    Returns the largest ``|mean_A h - mean_B h|``; with ``with_se`` also its
    standard error ``sqrt(se_A^2 + se_B^2)``.
    """
    if not 0 < alpha <= 1:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    if batchA.data.shape[1:] != batchB.data.shape[1:]:
        raise DimensionError("batches must hold matrices of equal shape")
    if anchors is None:
        if family_size < 1:
            raise ValidationError("family_size must be >= 1")
        pool = np.concatenate([batchA.data, batchB.data])
        idx = default_rng(seed, "hk-anchors").choice(len(pool), size=min(family_size, len(pool)),
                                                    replace=False)
        anchors = pool[np.sort(idx)]
    anchors = np.asarray(anchors, dtype=float).reshape(-1, *batchA.data.shape[1:])

    def stats(data):
        m, s = [], []
        for A in anchors:
            v = np.linalg.norm((data - A).reshape(len(data), -1), axis=1) ** alpha
            m.append(v.mean())
            s.append(v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0)
        return np.array(m), np.array(s)

    if batchA.data is batchB.data or np.array_equal(batchA.data, batchB.data):
        return (0.0, 0.0) if with_se else 0.0
    ma, sa = stats(batchA.data)
    mb, sb = stats(batchB.data)
    diff = np.abs(ma - mb)
    k = int(np.argmax(diff))
    if with_se:
        return float(diff[k]), float(np.hypot(sa[k], sb[k]))
    return float(diff[k])
