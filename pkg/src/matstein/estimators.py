"""Weighted flip-flop estimators of the Kronecker factors ``(Psi, Sigma)``.

The moment maps are

    M(Psi; W)  = sum_k X_k^T Psi^{-1/2} W Psi^{-1/2} X_k / (n tr W)     (estimates Sigma)
    N(Sigma; U) = sum_k X_k Sigma^{-1/2} U Sigma^{-1/2} X_k^T / (n tr U)  (estimates Psi)

Per-sample terms are reduced with a fixed pairwise tree so results do not
depend on chunking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionError, FlipFlopError, NotPositiveDefiniteError,
                     NumericalError, ValidationError)
from .matcore import SymPD, as_real_matrix, as_sympd, sym

RESCALE_RULES = ("trace_sigma_d", "det_sigma_one", "none")


def _tree_sum(T):
    """Pairwise sum over the leading axis (fixed order)."""
    T = np.asarray(T)
    while T.shape[0] > 1:
        if T.shape[0] % 2:
            head = T[:-1:2] + T[1::2]
            T = np.concatenate([head, T[-1:]])
        else:
            T = T[0::2] + T[1::2]
    return T[0]


def _sym_weight(W, dim, name):
    if isinstance(W, SymPD):
        return W.entries
    W = as_real_matrix(W, shape=(dim, dim), name=name)
    if not np.allclose(W, W.T, rtol=1e-12, atol=1e-14):
        raise ValidationError(f"{name} must be symmetric")
    return sym(W)


def _weighted_inverse(S, W):
    """``S^{-1/2} W S^{-1/2}``; exactly ``S^{-1}`` when ``W`` is the identity."""
    if np.array_equal(W, np.eye(S.dim)):
        return S.inv_array()
    R = S.inv_sqrt_array()
    return R @ W @ R


def _column_moment(data, A):
    # sum_k X_k^T A X_k
    return _tree_sum(np.swapaxes(data, -1, -2) @ A @ data)


def _row_moment(data, B):
    # sum_k X_k B X_k^T
    return _tree_sum(data @ B @ np.swapaxes(data, -1, -2))


def _trace(W, name):
    t = float(np.trace(W))
    if abs(t) <= 1e-12 * max(1.0, float(np.abs(W).max())):
        raise ValidationError(f"tr({name}) must be nonzero")
    return t


def _to_sympd(S, what, iteration=None):
    try:
        return SymPD(sym(S))
    except NotPositiveDefiniteError as exc:
        msg = f"{what} is not positive definite: {exc}"
        if iteration is None:
            raise NumericalError(msg) from None
        raise FlipFlopError(msg, iteration) from None


def sigma_update(batch, Psi, W=None):
    """``(1 / (n tr W)) sum_k X_k^T Psi^{-1/2} W Psi^{-1/2} X_k`` as a SymPD."""
    Psi = as_sympd(Psi, "Psi")
    if batch.nu != Psi.dim:
        raise DimensionError(f"batch has nu={batch.nu}, Psi is {Psi.dim}x{Psi.dim}")
    W = np.eye(Psi.dim) if W is None else _sym_weight(W, Psi.dim, "W")
    S = _column_moment(batch.data, _weighted_inverse(Psi, W)) / (batch.count * _trace(W, "W"))
    return _to_sympd(S, "Sigma update")


def psi_update(batch, Sigma, U=None):
    """``(1 / (n tr U)) sum_k X_k Sigma^{-1/2} U Sigma^{-1/2} X_k^T`` as a SymPD."""
    Sigma = as_sympd(Sigma, "Sigma")
    if batch.d != Sigma.dim:
        raise DimensionError(f"batch has d={batch.d}, Sigma is {Sigma.dim}x{Sigma.dim}")
    U = np.eye(Sigma.dim) if U is None else _sym_weight(U, Sigma.dim, "U")
    S = _row_moment(batch.data, _weighted_inverse(Sigma, U)) / (batch.count * _trace(U, "U"))
    return _to_sympd(S, "Psi update")


def rescale_identifiability(Psi, Sigma, rule="trace_sigma_d", target=None):
    """Return ``(c Psi, Sigma / c)`` so that the constraint on ``Sigma`` holds.

    ``trace_sigma_d`` makes ``tr(Sigma) = d`` (or ``target``), ``det_sigma_one``
    makes ``det(Sigma) = 1``; ``none`` returns the inputs.
    """
    Psi, Sigma = as_sympd(Psi, "Psi"), as_sympd(Sigma, "Sigma")
    if rule not in RESCALE_RULES:
        raise ValidationError(f"unknown rescale rule {rule!r}; expected one of {RESCALE_RULES}")
    if rule == "none":
        return Psi, Sigma
    if rule == "trace_sigma_d":
        c = Sigma.trace() / (Sigma.dim if target is None else target)
    else:
        c = float(np.exp(Sigma.logdet() / Sigma.dim))
    return Psi.scaled(c), Sigma.scaled(1.0 / c)


def shrink(Sigma_hat, Psi_hat, lam, tau=1.0):
    """Convex blends ``(1 - lam) S + lam tau I`` of both factors.

    Inputs may be merely nonnegative definite; the outputs are SymPD with
    eigenvalues ``(1 - lam) eig + lam tau``.
    """
    if not 0 < lam < 1:
        raise ValidationError(f"shrinkage weight must lie in (0, 1), got {lam}")
    if not tau > 0:
        raise ValidationError(f"ridge level must be positive, got {tau}")
    return _blend(Sigma_hat, lam, tau), _blend(Psi_hat, lam, tau)


def _blend(S, lam, tau):
    if isinstance(S, SymPD):
        A, w, V = S.entries, S.eigvals, S.eigvecs
    else:
        A = sym(as_real_matrix(S, name="S"))
        w, V = np.linalg.eigh(A)
        w, V = w[::-1], V[:, ::-1]
        if w[-1] < -1e-12 * max(1.0, abs(w[0])):
            raise NotPositiveDefiniteError("shrink input is not nonnegative definite")
        w = np.maximum(w, 0.0)
    out = (1 - lam) * A + lam * tau * np.eye(A.shape[0])
    return SymPD._from_eig(out, (1 - lam) * w + lam * tau, V)


def _ridge(S, lam, tau):
    if lam == 0:
        return S
    return (1 - lam) * S + lam * tau * np.eye(S.shape[0])


def kron_rel_change(Psi_a, Sigma_a, Psi_b, Sigma_b):
    Ka = np.kron(np.asarray(Psi_a), np.asarray(Sigma_a))
    Kb = np.kron(np.asarray(Psi_b), np.asarray(Sigma_b))
    return float(np.linalg.norm(Ka - Kb) / np.linalg.norm(Kb))


@dataclass(frozen=True)
class FlipFlopConfig:
    """Weights, identifiability rule, stopping rule and optional ridge blend."""

    W: object = None
    U: object = None
    rescale: str = "trace_sigma_d"
    tol: float = 1e-8
    max_iter: int = 200
    ridge_lambda: float = 0.0
    ridge_tau: float = 1.0

    def __post_init__(self):
        if self.rescale not in RESCALE_RULES:
            raise ValidationError(f"unknown rescale rule {self.rescale!r}")
        if not self.tol > 0 or self.max_iter < 1:
            raise ValidationError("tol must be positive and max_iter >= 1")
        if not 0 <= self.ridge_lambda < 1:
            raise ValidationError("ridge_lambda must lie in [0, 1)")
        if not self.ridge_tau > 0:
            raise ValidationError("ridge_tau must be positive")
        for name in ("W", "U"):
            M = getattr(self, name)
            if M is not None:
                _trace(np.asarray(M), name)

    def weights(self, nu, d):
        W = np.eye(nu) if self.W is None else _sym_weight(self.W, nu, "W")
        U = np.eye(d) if self.U is None else _sym_weight(self.U, d, "U")
        return W, U


@dataclass(frozen=True)
class FlipFlopResult:
    Psi_hat: SymPD
    Sigma_hat: SymPD
    iters: int
    converged: bool
    rescale_rule: str
    history: tuple = field(default=(), repr=False)

    def to_dict(self, seed=None):
        return {"psi": self.Psi_hat.entries.tolist(), "sigma": self.Sigma_hat.entries.tolist(),
                "iters": self.iters, "converged": self.converged,
                "rescale_rule": self.rescale_rule, "seed": seed}


def _flipflop_loop(data, Psi, W, U, config, sigma_step, psi_step):
    n = data.shape[0]
    trW, trU = _trace(W, "W"), _trace(U, "U")
    lam, tau = config.ridge_lambda, config.ridge_tau
    Sigma = None
    history = []
    for it in range(1, config.max_iter + 1):
        S = sigma_step(data, Psi, W) / (n * trW)
        Sigma_new = _to_sympd(_ridge(S, lam, tau), "Sigma iterate", it)
        P = psi_step(data, Sigma_new, U) / (n * trU)
        Psi_new = _to_sympd(_ridge(P, lam, tau), "Psi iterate", it)
        Psi_new, Sigma_new = rescale_identifiability(Psi_new, Sigma_new, config.rescale)
        if Sigma is not None:
            change = kron_rel_change(Psi_new, Sigma_new, Psi, Sigma)
            history.append(change)
            Psi, Sigma = Psi_new, Sigma_new
            if change < config.tol:
                return Psi, Sigma, it, True, tuple(history)
        else:
            Psi, Sigma = Psi_new, Sigma_new
    return Psi, Sigma, config.max_iter, False, tuple(history)


def _sigma_step(data, Psi, W):
    return _column_moment(data, _weighted_inverse(Psi, W))


def _psi_step(data, Sigma, U):
    return _row_moment(data, _weighted_inverse(Sigma, U))


def weighted_flipflop(batch, config=None, Psi0=None):
    """Alternate the weighted Sigma and Psi updates until ``kron(Psi, Sigma)`` settles.

    Parameters
    ----------
    batch : SampleBatch
    config : FlipFlopConfig, optional
    Psi0 : SymPD, optional
        Starting row scale, identity by default.

    Raises
    ------
    FlipFlopError
        When an iterate is not positive definite and no ridge blend is set.
    """
    config = FlipFlopConfig() if config is None else config
    W, U = config.weights(batch.nu, batch.d)
    Psi0 = SymPD.identity(batch.nu) if Psi0 is None else as_sympd(Psi0, "Psi0")
    Psi, Sigma, it, conv, hist = _flipflop_loop(batch.data, Psi0, W, U, config, _sigma_step, _psi_step)
    return FlipFlopResult(Psi, Sigma, it, conv, config.rescale, hist)


def dutilleul_flipflop(batch, Psi0=None, tol=1e-8, max_iter=200, rescale="trace_sigma_d"):
    """Classical unweighted flip-flop: ``Sigma = sum X^T Psi^{-1} X / (n nu)``, ``Psi = sum X Sigma^{-1} X^T / (n d)``."""

    def sig(data, Psi, _):
        return _column_moment(data, Psi.inv_array())

    def psi(data, Sigma, _):
        return _row_moment(data, Sigma.inv_array())

    config = FlipFlopConfig(rescale=rescale, tol=tol, max_iter=max_iter)
    Psi0 = SymPD.identity(batch.nu) if Psi0 is None else as_sympd(Psi0, "Psi0")
    Psi, Sigma, it, conv, hist = _flipflop_loop(batch.data, Psi0, np.eye(batch.nu), np.eye(batch.d),
                                                config, sig, psi)
    return FlipFlopResult(Psi, Sigma, it, conv, rescale, hist)


# ---- row/column missingness ---------------------------------------------------


@dataclass(frozen=True)
class BlockEstimate:
    """Estimate restricted to the identifiable index set; nothing else is reported."""

    indices: tuple
    block: np.ndarray
    dim: int

    def full(self):
        """``dim x dim`` masked array with unidentifiable entries masked out."""
        out = np.ma.masked_all((self.dim, self.dim))
        ix = np.ix_(self.indices, self.indices)
        out[ix] = self.block
        return out

    def to_dict(self):
        return {"indices": list(self.indices), "block": np.asarray(self.block).tolist()}


@dataclass(frozen=True)
class MaskedResult:
    Sigma_block: BlockEstimate
    Psi_block: BlockEstimate
    iters: int
    converged: bool


def _mask(M, dim, name):
    M = as_real_matrix(M, shape=(dim, dim), name=name)
    diag = np.diag(M)
    if np.any(M - np.diag(diag)) or not np.all(np.isin(diag, (0.0, 1.0))):
        raise ValidationError(f"{name} must be a diagonal 0/1 matrix")
    idx = tuple(int(i) for i in np.flatnonzero(diag))
    if not idx:
        raise ValidationError(f"empty mask: tr({name}) must be >= 1")
    return diag, idx


def _embed(block, idx, dim):
    # identifiable block padded by the identity on unobserved indices
    out = np.eye(dim)
    out[np.ix_(idx, idx)] = block
    return SymPD(out)


def masked_flipflop(batch, P, Q, config=None, Psi0=None):
    """Flip-flop with diagonal row mask ``P`` and column mask ``Q``.

    Only ``Y_k = P X_k Q`` enters. Each update uses the current block estimate
    of the other factor padded with the identity on the unobserved indices, so

        Q Sigma Q = sum_k Y_k^T Psi_P^{-1/2} P Psi_P^{-1/2} Y_k / (n tr P),
        P Psi P   = sum_k Y_k   Sigma_Q^{-1/2} Q Sigma_Q^{-1/2} Y_k^T / (n tr Q),

    followed by the trace rescaling ``tr(Q Sigma Q) = tr(Q)``. With full masks
    this is exactly :func:`weighted_flipflop` with identity weights.
    """
    config = FlipFlopConfig() if config is None else config
    nu, d = batch.nu, batch.d
    p, pidx = _mask(P, nu, "P")
    q, qidx = _mask(Q, d, "Q")
    if len(pidx) == nu and len(qidx) == d:
        res = weighted_flipflop(batch, FlipFlopConfig(rescale=config.rescale, tol=config.tol,
                                                      max_iter=config.max_iter,
                                                      ridge_lambda=config.ridge_lambda,
                                                      ridge_tau=config.ridge_tau), Psi0)
        return MaskedResult(BlockEstimate(qidx, res.Sigma_hat.entries, d),
                            BlockEstimate(pidx, res.Psi_hat.entries, nu), res.iters, res.converged)
    Y = batch.data * p[:, None] * q[None, :]
    n = batch.count
    Pm, Qm = np.diag(p), np.diag(q)
    trP, trQ = float(len(pidx)), float(len(qidx))
    lam, tau = config.ridge_lambda, config.ridge_tau
    Psi0 = SymPD.identity(nu) if Psi0 is None else as_sympd(Psi0, "Psi0")
    Psi_blk = Psi0.entries[np.ix_(pidx, pidx)]
    sig_blk = None
    it_done, converged = config.max_iter, False
    for it in range(1, config.max_iter + 1):
        Psi_full = _embed(Psi_blk, pidx, nu)
        S = _column_moment(Y, _weighted_inverse(Psi_full, Pm)) / (n * trP)
        S_blk = _to_sympd(_ridge(S[np.ix_(qidx, qidx)], lam, tau), "Sigma block iterate", it)
        Sigma_full = _embed(S_blk.entries, qidx, d)
        T = _row_moment(Y, _weighted_inverse(Sigma_full, Qm)) / (n * trQ)
        T_blk = _to_sympd(_ridge(T[np.ix_(pidx, pidx)], lam, tau), "Psi block iterate", it)
        if config.rescale == "none":
            new_psi, new_sig = T_blk, S_blk
        else:
            new_psi, new_sig = rescale_identifiability(T_blk, S_blk, config.rescale, target=trQ)
        if sig_blk is not None:
            change = kron_rel_change(new_psi, new_sig, Psi_blk, sig_blk)
        Psi_blk, sig_blk = new_psi.entries, new_sig.entries
        if it > 1 and change < config.tol:
            it_done, converged = it, True
            break
    return MaskedResult(BlockEstimate(qidx, sig_blk, d), BlockEstimate(pidx, Psi_blk, nu), it_done, converged)


# ---- structured projection -----------------------------------------------------


def _templates(mats, dim, name):
    out = []
    for k, M in enumerate(mats):
        M = as_real_matrix(M, shape=(dim, dim), name=f"{name}[{k}]")
        if not np.allclose(M, M.T, rtol=1e-12, atol=1e-14):
            raise ValidationError(f"{name}[{k}] must be symmetric")
        out.append(sym(M))
    if not out:
        raise ValidationError(f"{name} must be non-empty")
    return np.stack(out)


@dataclass(frozen=True)
class StructuredBasis:
    """Templates ``B_j`` (d x d), ``A_l`` (nu x nu) and weights ``U_m``, ``W_r``.

    Construction checks that every weight has nonzero trace and that both
    design matrices ``C_S[m, j] = tr(B_j U_m)`` and ``C_P[r, l] = tr(A_l W_r)``
    have full column rank.
    """

    B_templates: np.ndarray
    A_templates: np.ndarray
    U_weights: np.ndarray
    W_weights: np.ndarray
    C_sigma: np.ndarray = field(init=False, repr=False)
    C_psi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        B = np.asarray(self.B_templates, dtype=float)
        A = np.asarray(self.A_templates, dtype=float)
        d, nu = B.shape[-1], A.shape[-1]
        B = _templates(B, d, "B_templates")
        A = _templates(A, nu, "A_templates")
        U = _templates(self.U_weights, d, "U_weights")
        W = _templates(self.W_weights, nu, "W_weights")
        for name, stack in (("U_weights", U), ("W_weights", W)):
            for k, M in enumerate(stack):
                _trace(M, f"{name}[{k}]")
        C_s = np.einsum("jab,mba->mj", B, U)
        C_p = np.einsum("lab,rba->rl", A, W)
        if np.linalg.matrix_rank(C_s) < B.shape[0]:
            raise ValidationError("design matrix tr(B_j U_m) is rank deficient")
        if np.linalg.matrix_rank(C_p) < A.shape[0]:
            raise ValidationError("design matrix tr(A_l W_r) is rank deficient")
        for name, v in (("B_templates", B), ("A_templates", A), ("U_weights", U), ("W_weights", W),
                        ("C_sigma", C_s), ("C_psi", C_p)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def d(self):
        return self.B_templates.shape[-1]

    @property
    def nu(self):
        return self.A_templates.shape[-1]

    def sigma_of(self, beta):
        return np.einsum("j,jab->ab", np.asarray(beta, dtype=float), self.B_templates)

    def psi_of(self, alpha):
        return np.einsum("l,lab->ab", np.asarray(alpha, dtype=float), self.A_templates)


@dataclass(frozen=True)
class StructuredResult:
    beta_hat: np.ndarray
    alpha_hat: np.ndarray
    Sigma_hat: np.ndarray
    Psi_hat: np.ndarray
    sigma_pd: bool
    psi_pd: bool
    residual_sigma: float
    residual_psi: float

    def Sigma_sympd(self):
        if not self.sigma_pd:
            raise NumericalError("structured Sigma reconstruction is not positive definite")
        return SymPD(self.Sigma_hat)

    def Psi_sympd(self):
        if not self.psi_pd:
            raise NumericalError("structured Psi reconstruction is not positive definite")
        return SymPD(self.Psi_hat)


def structured_moments(batch, basis, Psi_eval, Sigma_eval):
    """Right-hand sides ``y_S[m] = mean_r tr(M_r(Psi) U_m)`` and ``y_P[r] = mean_m tr(N_m(Sigma) W_r)``."""
    Psi_eval, Sigma_eval = as_sympd(Psi_eval, "Psi_eval"), as_sympd(Sigma_eval, "Sigma_eval")
    if (batch.nu, batch.d) != (basis.nu, basis.d):
        raise DimensionError("batch shape does not match the structured basis")
    n = batch.count
    M = np.stack([_column_moment(batch.data, _weighted_inverse(Psi_eval, Wr)) / (n * np.trace(Wr))
                  for Wr in basis.W_weights])
    N = np.stack([_row_moment(batch.data, _weighted_inverse(Sigma_eval, Um)) / (n * np.trace(Um))
                  for Um in basis.U_weights])
    y_s = np.einsum("rab,mba->m", M, basis.U_weights) / len(basis.W_weights)
    y_p = np.einsum("mab,rba->r", N, basis.W_weights) / len(basis.U_weights)
    return y_s, y_p


def solve_structured(basis, y_sigma, y_psi):
    """Least-squares coefficients and reconstructions from the structured moment equations."""
    beta, *_ = np.linalg.lstsq(basis.C_sigma, y_sigma, rcond=None)
    alpha, *_ = np.linalg.lstsq(basis.C_psi, y_psi, rcond=None)
    S = sym(basis.sigma_of(beta))
    P = sym(basis.psi_of(alpha))
    return StructuredResult(beta, alpha, S, P, _is_pd(S), _is_pd(P),
                            float(np.linalg.norm(basis.C_sigma @ beta - y_sigma)),
                            float(np.linalg.norm(basis.C_psi @ alpha - y_psi)))


def _is_pd(S):
    try:
        SymPD(S)
        return True
    except NotPositiveDefiniteError:
        return False


def structured_projection(batch, basis, Psi_eval, Sigma_eval):
    """Structured least-squares estimates with the moment maps evaluated at ``(Psi_eval, Sigma_eval)``."""
    return solve_structured(basis, *structured_moments(batch, basis, Psi_eval, Sigma_eval))


def structured_population(basis, Psi, Sigma):
    """Population version: ``y_S[m] = tr(Sigma U_m)``, ``y_P[r] = tr(Psi W_r)``."""
    S, P = np.asarray(Sigma, dtype=float), np.asarray(Psi, dtype=float)
    y_s = np.einsum("ab,mba->m", S, basis.U_weights)
    y_p = np.einsum("ab,rba->r", P, basis.W_weights)
    return solve_structured(basis, y_s, y_p)


def structured_flipflop(batch, basis, Psi0=None, Sigma0=None, rescale="trace_sigma_d",
                        tol=1e-8, max_iter=200):
    """Alternate structured projections, evaluating the moment maps at the previous iterate.

    Goes beyond plugging in the true factors: the evaluation point is the
    current estimate, and each cycle ends with the identifiability rescaling.
    """
    Psi = SymPD.identity(batch.nu) if Psi0 is None else as_sympd(Psi0, "Psi0")
    Sigma = SymPD.identity(batch.d) if Sigma0 is None else as_sympd(Sigma0, "Sigma0")
    res = None
    for it in range(1, max_iter + 1):
        res = structured_projection(batch, basis, Psi, Sigma)
        if not (res.sigma_pd and res.psi_pd):
            raise FlipFlopError("structured reconstruction is not positive definite", it)
        Psi_new, Sigma_new = rescale_identifiability(SymPD(res.Psi_hat), SymPD(res.Sigma_hat), rescale)
        change = kron_rel_change(Psi_new, Sigma_new, Psi, Sigma)
        Psi, Sigma = Psi_new, Sigma_new
        if change < tol:
            return res, FlipFlopResult(Psi, Sigma, it, True, rescale)
    return res, FlipFlopResult(Psi, Sigma, max_iter, False, rescale)
