"""Acceptance criteria 1-10. Each test records one PASS/FAIL line (see conftest).

Tolerances and seeds are fixed here; a failure is reported, never retuned.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from matstein.bounds import (MomentSummary, calibrated_family, clt_bound_d3, discrepancy_estimate,
                             rademacher_moments, rademacher_standardized_sums, t_normal_bound)
from matstein.cli import main
from matstein.distributions import (MatrixNormalParams, MatrixTParams, inv_wishart_trace_moments,
                                    matrix_t_frobenius_moments, sample_matrix_normal, sample_matrix_t,
                                    wishart_batch)
from matstein.estimators import (FlipFlopConfig, StructuredBasis, dutilleul_flipflop, kron_rel_change,
                                 masked_flipflop, structured_population, structured_projection,
                                 weighted_flipflop)
from matstein.matcore import SymPD, random_sympd
from matstein.ou import OUConfig, coupled_contraction, exact_transition_sample, hk_lower_estimate, terminal_batch
from matstein.solver import QuadratureConfig, grid_points, regularity_bound_rhs, solve_stein, stein_residual
from matstein.stein import FunctionMeta, TestFunction, linear, probe_family, quadratic_probe, stein_identity_estimate

pytestmark = pytest.mark.acceptance
DATA = Path(__file__).parent / "data"


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0

    @property
    def ok(self):
        return self.elapsed <= self.limit

    def __str__(self):
        return f"runtime {self.elapsed:.1f}s (limit {self.limit}s)"


def _finish(k, checks, timer):
    """Record criterion ``k`` from ``{name: (ok, detail)}`` and assert it."""
    checks["runtime"] = (timer.ok, str(timer))
    ok = all(v[0] for v in checks.values())
    detail = "; ".join(f"{name}: {'ok' if v[0] else 'FAILED'} {v[1]}".strip() for name, v in checks.items())
    record(k, ok, detail)
    failed = [name for name, v in checks.items() if not v[0]]
    assert not failed, f"criterion {k} failed: {failed}; {detail}"


def test_criterion_01_stein_identity():
    rng = np.random.default_rng(101)
    passed = total = 0
    with Timer(30) as t:
        for nu in (1, 2, 3):
            for d in (1, 2, 3):
                Psi, Sigma = random_sympd(nu, rng), random_sympd(d, rng)
                batch = sample_matrix_normal(MatrixNormalParams.centered(Psi, Sigma), 100000, 1000 + 10 * nu + d)
                for f in probe_family(nu, d, Psi, 10, rng):
                    r = stein_identity_estimate(batch, f, Psi, Sigma)
                    passed += abs(r["mean"]) <= 4 * r["se"]
                    total += 1
    frac = passed / total
    _finish(1, {"coverage": (total == 90 and frac >= 0.95, f"{passed}/{total} within 4 SE")}, t)


def test_criterion_02_transition_law():
    rng = np.random.default_rng(202)
    Psi, Sigma = random_sympd(2, rng), random_sympd(2, rng)
    X0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    with Timer(60) as t:
        b = terminal_batch(X0, OUConfig(Psi, Sigma, horizon=1.0, dt=1e-3, scheme="euler", seed=2), 10000)
    se = b.data.std(0, ddof=1) / np.sqrt(b.count)
    z = np.abs(b.data.mean(0) - math.exp(-1) * X0) / se
    K = (1 - math.exp(-2)) * np.kron(Psi.entries, Sigma.entries)
    rel = np.linalg.norm(np.cov(b.vec().T) - K) / np.linalg.norm(K)
    _finish(2, {"mean": (bool(np.all(z <= 4)), f"max |z| {z.max():.2f}"),
                "covariance": (rel <= 0.05, f"rel err {rel:.4f}")}, t)


def test_criterion_03_contraction():
    rng = np.random.default_rng(303)
    Psi, Sigma = random_sympd(2, rng), random_sympd(2, rng)
    X0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    Y0 = -X0
    checks = {}
    with Timer(30) as t:
        rep = coupled_contraction(X0, Y0, OUConfig(Psi, Sigma, horizon=2.0, dt=1e-3, scheme="exact", seed=3))
        checks["exact coupling"] = (rep.max_dev <= 1e-12, f"max dev {rep.max_dev:.2e}")
        worst = -np.inf
        ok = True
        for alpha in (0.5, 1.0):
            for s in (0.25, 1.0, 2.0):
                est = []
                for tt in (s, s + 1.0):
                    A = exact_transition_sample(X0, tt, Psi, Sigma, 100000, 33)
                    B = exact_transition_sample(Y0, tt, Psi, Sigma, 100000, 33)
                    est.append(hk_lower_estimate(A, B, alpha, family_size=64, seed=4, with_se=True))
                (e0, s0), (e1, s1) = est
                err = math.sqrt(s1**2 + math.exp(-2 * alpha) * s0**2)
                margin = (e1 - math.exp(-alpha) * e0) / err
                worst = max(worst, margin)
                ok &= e1 <= math.exp(-alpha) * e0 + 5 * err
        checks["holder-kantorovich"] = (ok, f"worst (est(t+1) - e^-a est(t)) / err = {worst:.2f}")
    _finish(3, checks, t)


def _tanh11(nu, d, bounded_sup=1.0):
    def grad(X):
        G = np.zeros_like(X)
        G[..., 0, 0] = 1.0 / np.cosh(X[..., 0, 0]) ** 2
        return G

    return TestFunction(lambda X: np.tanh(X[..., 0, 0]), gradient=grad,
                        meta=FunctionMeta(holder_alpha=1.0, holder_const=1.0, coord_deriv_sups={1: 1.0},
                                          bounded_sup=bounded_sup),
                        shape=(nu, d), name="tanh(X11)")


def test_criterion_04_stein_solver():
    rng = np.random.default_rng(404)
    Psi, Sigma = random_sympd(2, rng), random_sympd(2, rng)
    cfg = QuadratureConfig(t_nodes=64, mc_inner=4096, seed=0)
    X = rng.standard_normal((10, 2, 2))
    checks = {}
    with Timer(60) as t:
        h = linear(rng.standard_normal((2, 2)))
        v, se = solve_stein(h, Psi, Sigma, cfg).value_and_se(X)
        zl = np.abs(v + h(X)) / se
        checks["linear"] = (bool(np.all(zl <= 3)), f"max |z| {zl.max():.2f}")
        W, U = np.array([[1.5, 0.4], [0.4, 1.0]]), np.array([[1.0, -0.2], [-0.2, 2.0]])
        q = quadratic_probe(W, U, Psi).with_meta(holder_alpha=1.0)
        v, se = solve_stein(q, Psi, Sigma, cfg).value_and_se(X)
        target = -0.5 * (q(X) - 0.5 * np.trace(W) * np.trace(Sigma.entries @ U))
        zq = np.abs(v - target) / se
        checks["quadratic"] = (bool(np.all(zq <= 3)), f"max |z| {zq.max():.2f}")
        I2 = SymPD.identity(2)
        base = QuadratureConfig(t_nodes=128, mc_inner=16384, seed=0)
        Xr = np.random.default_rng(405).standard_normal((10, 2, 2))
        r1 = np.median(np.abs(stein_residual(solve_stein(_tanh11(2, 2), I2, I2, base), Xr)))
        r2 = np.median(np.abs(stein_residual(solve_stein(_tanh11(2, 2), I2, I2, base.refined(2)), Xr)))
        checks["residual"] = (r1 <= 2e-2, f"median {r1:.2e} at 128/16384")
        checks["halving"] = (r2 <= 0.5 * r1, f"median {r2:.2e} at 256/32768, ratio {r2 / r1:.2f}")
    _finish(4, checks, t)


def test_criterion_05_regularity():
    rng = np.random.default_rng(505)
    C = rng.standard_normal((2, 2))
    C /= np.linalg.norm(C)
    sin_h = TestFunction(lambda X: np.sin(np.einsum("...ij,ij->...", X, C)),
                         meta=FunctionMeta(holder_alpha=1.0, holder_const=1.0, coord_deriv_sups={1: 1.0},
                                           bounded_sup=1.0), shape=(2, 2), name="sin<C,X>")
    # sup |d_ij h| per coordinate, known in closed form
    partial_sup = {"tanh(X11)": np.array([[1.0, 0.0], [0.0, 0.0]]), "sin<C,X>": np.abs(C)}
    levels = {"isotropic": (SymPD.identity(2), SymPD.identity(2)),
              "anisotropic": (random_sympd(2, rng, cond=20.0), random_sympd(2, rng, cond=20.0))}
    cfg = QuadratureConfig(t_nodes=64, mc_inner=4096, seed=5)
    worst1 = worst2 = 0.0
    ok = True
    with Timer(60) as t:
        for level, (Psi, Sigma) in levels.items():
            P = grid_points(Psi, Sigma, 100, 6)
            for h in (_tanh11(2, 2), sin_h):
                G = np.abs(solve_stein(h, Psi, Sigma, cfg).gradient(P)).max(axis=0)
                rhs1 = partial_sup[h.name]
                ok &= regularity_bound_rhs("coord_m", 1, h, Psi, Sigma) >= rhs1.max()
                rhs2 = np.array([[regularity_bound_rhs("coord_bounded", 1, h, Psi, Sigma, [(i, j)])
                                  for j in range(2)] for i in range(2)])
                ok &= bool(np.all(G <= 1.05 * rhs1 + 1e-12)) and bool(np.all(G <= 1.05 * rhs2))
                with np.errstate(divide="ignore", invalid="ignore"):
                    worst1 = max(worst1, np.nanmax(np.where(rhs1 > 0, G / rhs1, 0.0)))
                worst2 = max(worst2, float((G / rhs2).max()))
    _finish(5, {"bounds": (ok, f"max sup/rhs: first-order {worst1:.3f}, bounded {worst2:.3f}")}, t)


def test_criterion_06_trace_and_frobenius_moments():
    checks = {}
    with Timer(60) as t:
        def mc(values, exact, name):
            m, se = values.mean(), values.std(ddof=1) / math.sqrt(values.size)
            checks[name] = (abs(m - exact) <= 4 * se, f"{m:.4f} vs {exact:.4f} (se {se:.4f})")

        assert inv_wishart_trace_moments(2, 5)["m1"] == pytest.approx(1.0, rel=1e-14)
        Wi = np.linalg.inv(wishart_batch(2, 5.0, 200000, 6, "acc"))
        mc(np.trace(Wi, axis1=1, axis2=2), 1.0, "m1(d=2,a=5)")
        m = inv_wishart_trace_moments(2, 7)
        closed = abs(m["m2tr"] - 0.3) <= 1e-14 and abs(m["m1sq"] - 0.4) <= 1e-14
        Wi = np.linalg.inv(wishart_batch(2, 7.0, 200000, 7, "acc"))
        t1 = np.trace(Wi, axis1=1, axis2=2)
        mc(np.einsum("kij,kji->k", Wi, Wi), 0.3, "m2tr(d=2,a=7)")
        mc(t1**2, 0.4, "m1sq(d=2,a=7)")
        I1 = SymPD.identity(1)
        m2 = matrix_t_frobenius_moments(1, 1, 4)["m2"]
        x = sample_matrix_t(MatrixTParams(4.0, I1, I1), 200000, 8).data.ravel()
        mc(x**2, m2, "m2(n=4)")
        m4 = matrix_t_frobenius_moments(1, 1, 8)["m4"]
        x = sample_matrix_t(MatrixTParams(8.0, I1, I1), 200000, 9).data.ravel()
        mc(x**4, m4, "m4(n=8)")
        student = all(matrix_t_frobenius_moments(1, 1, n)["m4"] == pytest.approx(3 * n * n / ((n - 2) * (n - 4)),
                                                                              rel=1e-14)
                      for n in (5, 6, 8, 11.5, 100))
        checks["closed forms"] = (closed and m2 == 2.0 and abs(m4 - 8) <= 1e-13 and student,
                                  "m1=1, m2tr=0.3, m1sq=0.4, m2=2, m4=8, Student-t identity")
    _finish(6, checks, t)


def test_criterion_07_clt_bound():
    I2 = SymPD.identity(2)
    fam = calibrated_family("H3", 2, 2, 32, 70)
    mom = rademacher_moments(2, 2)
    checks = {}
    ests = []
    with Timer(120) as t:
        dominated = True
        for k, n in enumerate((100, 1000, 10000)):
            S = rademacher_standardized_sums(2, 2, n, 100000, 71)
            Z = sample_matrix_normal(MatrixNormalParams.centered(I2, I2), 100000, 72 + k)
            r = discrepancy_estimate(S, Z, fam, "H3")
            bound = clt_bound_d3(mom, I2, I2, n)
            dominated &= r.sup_est <= bound + 5 * r.sup_se
            ests.append(r.sup_est)
        checks["dominance"] = (dominated, f"estimates {[f'{e:.4f}' for e in ests]}")
        ratios = [ests[0] / ests[1], ests[1] / ests[2]]
        checks["rate"] = (all(2.5 <= q <= 4.2 for q in ratios), f"decade ratios {[f'{q:.2f}' for q in ratios]}")
        scalar = clt_bound_d3(MomentSummary(1, 1, 1.0, 1.0), SymPD.identity(1), SymPD.identity(1), 100)
        checks["scalar value"] = (abs(scalar - 0.05) <= 1e-12, f"{scalar!r}")
    _finish(7, checks, t)


def test_criterion_08_matrix_t_bound():
    I2 = SymPD.identity(2)
    fam = calibrated_family("H1", 2, 2, 32, 80)
    Z = sample_matrix_normal(MatrixNormalParams.centered(I2, I2), 100000, 81)
    rows = []
    ok = True
    with Timer(120) as t:
        for k, n in enumerate((6, 10, 20, 50)):
            T = sample_matrix_t(MatrixTParams(float(n), I2, I2), 100000, 82 + k)
            r = discrepancy_estimate(T, Z, fam, "H1")
            b = t_normal_bound(n, 2, 2, I2, I2)
            ok &= r.sup_est <= b + 5 * r.sup_se
            rows.append(f"n={n}: {r.sup_est:.4f} <= {b:.3f}")
        v = t_normal_bound(8, 1, 1, SymPD.identity(1), SymPD.identity(1))
    _finish(8, {"dominance": (ok, ", ".join(rows)), "value": (abs(v - 1.44338) <= 1e-5, f"{v:.6f}")}, t)


def test_criterion_09_flipflop(tmp_path):
    checks = {}
    with Timer(60) as t:
        Psi0, Sig0 = SymPD(np.array([[2.0, 0.5], [0.5, 1.0]])), SymPD.diag([1.0, 2.0, 3.0])
        b = sample_matrix_normal(MatrixNormalParams.centered(Psi0, Sig0), 10000, 90)
        w = weighted_flipflop(b, FlipFlopConfig(W=np.eye(2), U=np.eye(3)))
        d = dutilleul_flipflop(b)
        same = (np.array_equal(w.Psi_hat.entries, d.Psi_hat.entries)
                and np.array_equal(w.Sigma_hat.entries, d.Sigma_hat.entries) and w.iters == d.iters)
        checks["dutilleul"] = (same, "bit-identical" if same else "differs")
        errs = []
        for s in range(3):
            rng = np.random.default_rng(900 + s)
            Psi, Sigma = random_sympd(2, rng), random_sympd(3, rng)
            r = weighted_flipflop(sample_matrix_normal(MatrixNormalParams.centered(Psi, Sigma), 10000, 91 + s))
            errs.append(kron_rel_change(r.Psi_hat, r.Sigma_hat, Psi, Sigma))
        checks["recovery"] = (max(errs) <= 0.05, f"rel errs {[f'{e:.4f}' for e in errs]}")
        Psi = SymPD(np.array([[1.5, 0.6], [0.6, 2.0]]))
        Sigma = SymPD(np.array([[1.2, 0.3], [0.3, 0.8]]))
        m = masked_flipflop(sample_matrix_normal(MatrixNormalParams.centered(Psi, Sigma), 10000, 95),
                            np.diag([0.0, 1.0]), np.eye(2))
        es = np.linalg.norm(m.Sigma_block.block - Sigma.entries) / np.linalg.norm(Sigma.entries)
        ep = abs(m.Psi_block.block[0, 0] - Psi.entries[1, 1]) / Psi.entries[1, 1]
        checks["masked"] = (m.converged and es <= 0.1 and ep <= 0.1, f"Sigma {es:.4f}, Psi_22 {ep:.4f}")
        for name in ("estimate_config.json", "synthetic_mn_2x3.csv"):
            shutil.copy(DATA / name, tmp_path / name)
        out = tmp_path / "est.json"
        rc = main(["estimate", "--config", str(tmp_path / "estimate_config.json"), "--output", str(out)])
        golden = rc == 0 and out.read_bytes() == (DATA / "estimate_golden.json").read_bytes()
        checks["golden"] = (golden, "byte-identical" if golden else f"rc={rc} or bytes differ")
    _finish(9, checks, t)


def test_criterion_10_structured_projection():
    Psi, Sigma = SymPD(np.array([[2.0, 0.5], [0.5, 1.0]])), SymPD.diag([1.0, 2.0, 3.0])
    B = [np.diag(e) for e in np.eye(3)]
    A = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0]), np.array([[0.0, 1.0], [1.0, 0.0]])]
    basis = StructuredBasis(B, A, [np.diag(e) for e in np.eye(3)],
                            [np.eye(2), np.diag([1.0, 0.0]), np.ones((2, 2))])
    beta, alpha = np.array([1.0, 2.0, 3.0]), np.array([2.0, 1.0, 0.5])
    checks = {}
    with Timer(120) as t:
        pop = structured_population(basis, Psi, Sigma)
        exact = (pop.residual_sigma <= 1e-12 and pop.residual_psi <= 1e-12
                 and np.allclose(pop.beta_hat, beta, rtol=0, atol=1e-12)
                 and np.allclose(pop.alpha_hat, alpha, rtol=0, atol=1e-12))
        checks["population"] = (exact, f"residuals {pop.residual_sigma:.1e}, {pop.residual_psi:.1e}")
        params = MatrixNormalParams.centered(Psi, Sigma)
        medians = []
        for k, n in enumerate((1000, 10000, 100000)):
            errs = []
            for r in range(20):
                res = structured_projection(sample_matrix_normal(params, n, 10000 * (k + 1) + r), basis, Psi, Sigma)
                errs.append(max(np.abs(res.beta_hat - beta).max(), np.abs(res.alpha_hat - alpha).max()))
            medians.append(float(np.median(errs)))
        dec = medians[0] > medians[1] > medians[2]
        checks["consistency"] = (dec, f"median errors {[f'{m:.4f}' for m in medians]}")
    _finish(10, checks, t)
