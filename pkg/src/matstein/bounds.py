"""Closed-form error-bound right-hand sides and finite-family lower estimates.

Integral probability metrics such as ``d_W`` or ``d_p`` are suprema over
infinite function classes and are never computed here. A
:func:`discrepancy_estimate` over a certified finite family is a *lower*
estimate, so every comparison with a bound is one-sided.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import SampleBatch
from .errors import UncertifiedFunctionError, ValidationError
from .matcore import as_sympd
from .rng import default_rng
from .stein import FunctionMeta, TestFunction, coordinate

SOURCES = ("monte_carlo", "user")
CLASSES = ("H1", "H2", "H3")

# sups of |tanh^(k)| for k = 1, 2, 3
TANH_D1, TANH_D2, TANH_D3 = 1.0, 4.0 / (3.0 * np.sqrt(3.0)), 2.0


@dataclass(frozen=True)
class MomentSummary:
    """Absolute moment tensor ``E|X_a X_b X_c|`` (shape ``(nu, d) * 3``) and ``E|X_ij|``."""

    nu: int
    d: int
    abs_third: np.ndarray
    abs_first: np.ndarray
    source: str = "user"
    abs_third_se: np.ndarray = None
    abs_first_se: np.ndarray = None

    def __post_init__(self):
        t = np.asarray(self.abs_third, dtype=float)
        f = np.asarray(self.abs_first, dtype=float)
        shape = (self.nu, self.d)
        if t.shape == ():
            t = np.full(shape * 3, float(t))
        if f.shape == ():
            f = np.full(shape, float(f))
        if t.shape != shape * 3 or f.shape != shape:
            raise ValidationError(f"moment arrays must have shapes {shape * 3} and {shape}")
        if np.any(t < 0) or np.any(f < 0) or not (np.all(np.isfinite(t)) and np.all(np.isfinite(f))):
            raise ValidationError("absolute moments must be finite and nonnegative")
        if self.source not in SOURCES:
            raise ValidationError(f"source must be one of {SOURCES}")
        t = _symmetrize(t)
        se_t = np.zeros_like(t) if self.abs_third_se is None else np.asarray(self.abs_third_se, float)
        se_f = np.zeros_like(f) if self.abs_first_se is None else np.asarray(self.abs_first_se, float)
        for name, v in (("abs_third", t), ("abs_first", f), ("abs_third_se", se_t), ("abs_first_se", se_f)):
            v = np.array(v)
            v.setflags(write=False)
            object.__setattr__(self, name, v)


def _symmetrize(T):
    nu, d = T.shape[:2]
    m = nu * d
    F = T.reshape(m, m, m)
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    F = sum(F.transpose(p) for p in perms) / 6.0
    return F.reshape(T.shape)


def estimate_moments(batch):
    """Monte Carlo absolute moments with standard errors (needs >= 100 draws)."""
    if batch.count < 100:
        raise ValidationError(f"estimate_moments needs at least 100 draws, got {batch.count}")
    n, nu, d = batch.data.shape
    A = np.abs(batch.data.reshape(n, -1))
    first = A.mean(0)
    first_se = A.std(0, ddof=1) / np.sqrt(n)
    third = np.einsum("ka,kb,kc->abc", A, A, A, optimize=True) / n
    second_mom = np.einsum("ka,kb,kc->abc", A * A, A * A, A * A, optimize=True) / n
    var = np.maximum(second_mom - third ** 2, 0.0) * n / (n - 1)
    third_se = np.sqrt(var / n)
    return MomentSummary(nu, d, third.reshape((nu, d) * 3), first.reshape(nu, d), "monte_carlo",
                         third_se.reshape((nu, d) * 3), first_se.reshape(nu, d))


def _clt_sum(moments, Psi, Sigma):
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    if (Psi.dim, Sigma.dim) != (moments.nu, moments.d):
        raise ValidationError("moment shape does not match (Psi, Sigma)")
    # sum over (i1, i2, i3, j1, j2, j3) of |Psi_i1i2 Sigma_j1j2| E|X_i3j3| factorizes
    cross = np.abs(Psi.entries).sum() * np.abs(Sigma.entries).sum() * moments.abs_first.sum()
    return 0.5 * moments.abs_third.sum() + cross


def clt_bound_d3(moments, Psi, Sigma, n):
    """``(1 / (3 sqrt n)) sum {1/2 E|X_a X_b X_c| + |Psi_i1i2 Sigma_j1j2| E|X_i3j3|}``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    return float(_clt_sum(moments, Psi, Sigma) / (3.0 * np.sqrt(n)))


def anisotropy_factor(Psi, Sigma):
    """``max_{i,j} sqrt((Psi^{-1})_ii (Sigma^{-1})_jj)``."""
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    return float(np.sqrt(np.diag(Psi.inv_array()).max() * np.diag(Sigma.inv_array()).max()))


def clt_bound_d2(moments, Psi, Sigma, n):
    """``sqrt(2 pi) / (4 sqrt n)`` times the anisotropy factor times the same sum as :func:`clt_bound_d3`."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    pre = np.sqrt(2.0 * np.pi) / (4.0 * np.sqrt(n))
    return float(pre * anisotropy_factor(Psi, Sigma) * _clt_sum(moments, Psi, Sigma))


def t_normal_bound(n_dof, nu, d, Psi, Sigma):
    """``10 / sqrt(1 - 2/n) * (nu d)^2 / n * ||Psi||_2^{1/2} ||Sigma||_2^{1/2}``."""
    if not n_dof > 2:
        raise ValidationError(f"t_normal_bound needs n_dof > 2, got {n_dof}")
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    if (Psi.dim, Sigma.dim) != (nu, d):
        raise ValidationError("scale shapes do not match (nu, d)")
    n = float(n_dof)
    return float(10.0 / np.sqrt(1.0 - 2.0 / n) * (nu * d) ** 2 / n
                 * np.sqrt(Psi.spectral_norm() * Sigma.spectral_norm()))


# ---- certified test families ---------------------------------------------------


def _order(h_class):
    if h_class not in CLASSES:
        raise ValidationError(f"class must be one of {CLASSES}, got {h_class!r}")
    return int(h_class[1])


def certify(h, h_class, slack=1e-12):
    """Raise unless ``h`` carries metadata placing it in ``h_class``."""
    p = _order(h_class)
    c = h.meta.coord_deriv_sups.get(p)
    if h_class not in h.meta.classes or c is None or c > 1.0 + slack:
        raise UncertifiedFunctionError(
            f"{h.name} is not certified for {h_class}: needs coord_deriv_sups[{p}] <= 1, got {c}")


def _ridge_function(kind, C, c, name):
    """``c g(<C, X>)`` for ``g`` in {tanh, logcosh, cube, abscube, square} with exact derivatives."""
    C = np.array(C, dtype=float)
    C.setflags(write=False)
    fro, cmax = float(np.linalg.norm(C)), float(np.abs(C).max())
    CC = np.multiply.outer(C, C)

    if kind == "tanh":
        g = np.tanh
        g1 = lambda s: 1.0 / np.cosh(s) ** 2
        g2 = lambda s: -2.0 * np.tanh(s) / np.cosh(s) ** 2
        sups = (TANH_D1, TANH_D2, TANH_D3)
        bsup = 2.0 * c
    elif kind == "logcosh":
        g = lambda s: np.logaddexp(s, -s) - np.log(2.0)
        g1 = np.tanh
        g2 = lambda s: 1.0 / np.cosh(s) ** 2
        sups = (TANH_D1, 1.0, TANH_D2)
        bsup = None
    elif kind == "square":
        g = lambda s: 0.5 * s * s
        g1 = lambda s: s
        g2 = lambda s: np.ones_like(s)
        sups = (np.inf, 1.0, 0.0)
        bsup = None
    elif kind == "cube":
        g = lambda s: s ** 3 / 6.0
        g1 = lambda s: 0.5 * s * s
        g2 = lambda s: s
        sups = (np.inf, np.inf, 1.0)
        bsup = None
    elif kind == "abscube":
        g = lambda s: np.abs(s) ** 3 / 6.0
        g1 = lambda s: 0.5 * s * np.abs(s)
        g2 = np.abs
        sups = (np.inf, np.inf, 1.0)
        bsup = None
    else:
        raise ValidationError(f"unknown ridge kind {kind!r}")

    def s_of(X):
        return np.einsum("...ij,ij->...", X, C)

    def value(X):
        return c * g(s_of(X))

    def grad(X):
        return c * g1(s_of(X))[..., None, None] * C

    def hess(X):
        return c * g2(s_of(X))[..., None, None, None, None] * CC

    # coordinate-derivative Lipschitz constants (Frobenius) of orders 1..3
    consts = {1: c * fro * sups[0], 2: c * cmax * fro * sups[1], 3: c * cmax ** 2 * fro * sups[2]}
    consts = {k: float(v) for k, v in consts.items() if np.isfinite(v)}
    lip = consts.get(1)
    classes = frozenset(k for k in CLASSES if consts.get(int(k[1]), np.inf) <= 1.0 + 1e-12)
    meta = FunctionMeta(holder_alpha=1.0 if lip is not None else None, holder_const=lip,
                        coord_deriv_sups=consts, bounded_sup=bsup, classes=classes)
    return TestFunction(value, gradient=grad, hessian=hess, meta=meta, shape=C.shape, name=name)


def _scale_for(kind, p, cmax):
    # c making the order-p constant equal to 1 for unit-Frobenius C
    table = {
        "tanh": {1: 1.0, 2: 1.0 / (cmax * TANH_D2), 3: 1.0 / (cmax ** 2 * TANH_D3)},
        "logcosh": {1: 1.0, 2: 1.0 / cmax, 3: 1.0 / (cmax ** 2 * TANH_D2)},
        "square": {2: 1.0 / cmax, 3: 1.0 / cmax},
        "cube": {3: 1.0 / cmax ** 2},
        "abscube": {3: 1.0 / cmax ** 2},
    }
    return table[kind][p]


_KINDS = {1: ("logcosh", "tanh"), 2: ("logcosh", "tanh", "square"),
          3: ("abscube", "logcosh", "tanh", "cube", "square")}


def calibrated_family(h_class, nu, d, size, seed):
    """Seeded family of test functions certified to lie in ``h_class``.

    The family starts with the coordinate projections ``X_ij`` and continues
    with ridge functions ``c g(<C, X>_F)``, ``||C||_F = 1``, for ``g`` among
    ``logcosh`` and ``tanh`` (all classes), ``s^2 / 2`` (H2, H3) and
    ``s^3 / 6``, ``|s|^3 / 6`` (H3). ``c`` is chosen so that the Lipschitz
    constant of every coordinate partial of order ``p - 1`` is exactly 1.
    """
    p = _order(h_class)
    if size < 1:
        raise ValidationError("size must be >= 1")
    out = []
    for i in range(nu):
        for j in range(d):
            if len(out) < size:
                f = coordinate(i, j, nu, d)
                meta = FunctionMeta(holder_alpha=1.0, holder_const=1.0,
                                    coord_deriv_sups={1: 1.0, 2: 0.0, 3: 0.0},
                                    frechet_sups={1: 1.0, 2: 0.0}, classes=frozenset(CLASSES))
                out.append(TestFunction(f.evaluator, f.gradient, f.hessian, meta, f.shape, f.name))
    rng = default_rng(seed, "family", h_class)
    kinds = _KINDS[p]
    k = 0
    while len(out) < size:
        kind = kinds[k % len(kinds)]
        C = rng.standard_normal((nu, d))
        C /= np.linalg.norm(C)
        c = _scale_for(kind, p, float(np.abs(C).max()))
        out.append(_ridge_function(kind, C, c, f"{kind}[{k}]"))
        k += 1
    return out


def audit_certificate(h, p, pairs=50, seed=0, scale=2.0):
    """Largest observed ratio of the order-``p`` Lipschitz quotient to its certified constant.

    Uses the function's own derivatives (``p = 2, 3``) or values (``p = 1``)
    on ``pairs`` seeded point pairs at a spread of distances. Returns 0 when
    the certified constant is 0 and no variation is observed.
    """
    c = h.meta.coord_deriv_sups.get(p)
    if c is None:
        raise UncertifiedFunctionError(f"{h.name} has no order-{p} constant")
    rng = default_rng(seed, "audit", p)
    shape = h.shape
    X = scale * rng.standard_normal((pairs,) + shape)
    r = 10.0 ** rng.uniform(-3, 0, size=pairs)
    D = rng.standard_normal((pairs,) + shape)
    D *= (r / np.linalg.norm(D.reshape(pairs, -1), axis=1))[:, None, None]
    Y = X + D
    dist = np.linalg.norm(D.reshape(pairs, -1), axis=1)
    if p == 1:
        diff = np.abs(h(X) - h(Y))
    elif p == 2:
        diff = np.abs(h.gradient(X) - h.gradient(Y)).reshape(pairs, -1).max(axis=1)
    else:
        HX = np.broadcast_to(h.hessian(X), (pairs,) + shape * 2)
        HY = np.broadcast_to(h.hessian(Y), (pairs,) + shape * 2)
        diff = np.abs(HX - HY).reshape(pairs, -1).max(axis=1)
    q = float((diff / dist).max())
    if c == 0:
        return 0.0 if q <= 1e-9 else np.inf
    return q / c


@dataclass(frozen=True)
class DiscrepancyResult:
    sup_est: float
    sup_se: float
    per_h: list = field(default_factory=list)
    h_class: str = "H1"

    @property
    def max_se(self):
        return max((r["se"] for r in self.per_h), default=0.0)

    def to_dict(self):
        return {"sup_est": self.sup_est, "sup_se": self.sup_se, "max_se": self.max_se,
                "h_class": self.h_class, "per_h": self.per_h,
                "note": "lower estimate of the metric over a finite certified family"}


def discrepancy_estimate(batchA, batchB, family, h_class="H1"):
    """``max_h |mean_A h - mean_B h|`` over a certified family, with per-function SEs.

    Every member must be certified for ``h_class`` (see :func:`certify`).
    """
    if batchA.data.shape[1:] != batchB.data.shape[1:]:
        raise ValidationError("batches must hold matrices of equal shape")
    if not family:
        raise ValidationError("family must be non-empty")
    for h in family:
        certify(h, h_class)
    same = batchA.data is batchB.data or np.array_equal(batchA.data, batchB.data)
    per_h = []
    for h in family:
        a, b = h(batchA.data), h(batchB.data)
        if same:
            diff, se = 0.0, 0.0
        else:
            diff = float(a.mean() - b.mean())
            se = float(np.hypot(a.std(ddof=1) / np.sqrt(len(a)), b.std(ddof=1) / np.sqrt(len(b))))
        per_h.append({"name": h.name, "mean_diff": diff, "se": se})
    k = int(np.argmax([abs(r["mean_diff"]) for r in per_h]))
    return DiscrepancyResult(abs(per_h[k]["mean_diff"]), per_h[k]["se"], per_h, h_class)


def rademacher_standardized_sums(nu, d, n, count, seed):
    """``count`` draws of ``n^{-1/2} sum_k X_k`` for iid Rademacher-entry matrices ``X_k``.

    Each entry of the sum is exactly ``(2 B - n) / sqrt(n)`` with
    ``B ~ Binomial(n, 1/2)``; the covariance of ``X_k`` is ``I (x) I``.
    """
    if n < 1 or count < 1:
        raise ValidationError("n and count must be >= 1")
    B = default_rng(seed, "rademacher", n).binomial(n, 0.5, size=(count, nu, d))
    return SampleBatch((2.0 * B - n) / np.sqrt(n), seed)


def rademacher_moments(nu, d):
    """Exact absolute moments of a Rademacher-entry matrix (all equal to 1)."""
    return MomentSummary(nu, d, np.ones((nu, d) * 3), np.ones((nu, d)), "user")
