import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from matstein.distributions import (MatrixNormalParams, MatrixTParams, SampleBatch, inv_wishart_trace_moments,
                                    log_density_matrix_normal, log_density_matrix_t,
                                    matrix_t_frobenius_moments, sample_matrix_normal, sample_matrix_t,
                                    sample_wishart, wishart_batch)
from matstein.errors import ValidationError
from matstein.matcore import SymPD, random_sympd


def _params(seed, nu, d):
    rng = np.random.default_rng(seed)
    return MatrixNormalParams(rng.standard_normal((nu, d)), random_sympd(nu, rng), random_sympd(d, rng))


def test_matrix_normal_moments(scales):
    Psi, Sigma = scales
    M = np.arange(6.0).reshape(2, 3) / 3
    b = sample_matrix_normal(MatrixNormalParams(M, Psi, Sigma), 100000, 4)
    se = b.data.std(0, ddof=1) / np.sqrt(b.count)
    assert np.all(np.abs(b.data.mean(0) - M) <= 4 * se)
    C = np.cov(b.vec().T)
    K = np.kron(Psi.entries, Sigma.entries)
    assert np.linalg.norm(C - K) / np.linalg.norm(K) < 0.03


def test_sampling_reproducible_and_thread_invariant(scales):
    p = MatrixNormalParams.centered(*scales)
    a = sample_matrix_normal(p, 9000, 3, threads=1)
    b = sample_matrix_normal(p, 9000, 3, threads=3)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, sample_matrix_normal(p, 9000, 4).data)
    # prefix property: sample k depends only on (seed, k)
    assert np.array_equal(sample_matrix_normal(p, 10, 3).data, a.data[:10])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 3))
def test_log_density_matches_vectorised_gaussian(seed, nu, d):
    p = _params(seed, nu, d)
    X = np.random.default_rng(seed + 1).standard_normal((nu, d))
    ref = stats.multivariate_normal(p.M.reshape(-1), np.kron(p.Psi.entries, p.Sigma.entries)).logpdf(X.reshape(-1))
    assert np.isclose(log_density_matrix_normal(p, X), ref, rtol=1e-10, atol=1e-10)


def test_log_density_matches_scipy_matrix_normal(scales):
    Psi, Sigma = scales
    p = MatrixNormalParams(np.ones((2, 3)), Psi, Sigma)
    X = np.random.default_rng(0).standard_normal((2, 3))
    ref = stats.matrix_normal(p.M, Psi.entries, Sigma.entries).logpdf(X)
    assert np.isclose(log_density_matrix_normal(p, X), ref, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.floats(0.5, 30.0))
def test_matrix_t_row_case_is_multivariate_t(seed, d, n):
    rng = np.random.default_rng(seed)
    Sigma = random_sympd(d, rng)
    psi = float(rng.uniform(0.5, 2.0))
    p = MatrixTParams(n, SymPD(np.array([[psi]])), Sigma)
    x = rng.standard_normal((1, d))
    ref = stats.multivariate_t(np.zeros(d), psi * Sigma.entries, df=n).logpdf(x[0])
    assert np.isclose(log_density_matrix_t(p, x), ref, rtol=1e-9, atol=1e-9)


def test_matrix_t_scalar_is_student_t():
    p = MatrixTParams(5.0, SymPD.identity(1), SymPD.identity(1))
    for x in (-3.0, 0.0, 0.7):
        assert np.isclose(log_density_matrix_t(p, np.array([[x]])), stats.t(5.0).logpdf(x), rtol=1e-12)


def test_matrix_t_sampler_ks():
    p = MatrixTParams(6.0, SymPD.identity(1), SymPD.identity(1))
    x = sample_matrix_t(p, 20000, 1).data.ravel()
    assert stats.kstest(x, stats.t(6.0).cdf).pvalue > 1e-3


def test_matrix_t_density_integrates_along_rows():
    # nu = 2, d = 1: the T law is a bivariate t with shape Psi * sigma
    Psi = SymPD(np.array([[2.0, 0.3], [0.3, 1.0]]))
    p = MatrixTParams(7.0, Psi, SymPD(np.array([[1.5]])))
    X = np.array([[0.4], [-1.1]])
    ref = stats.multivariate_t(np.zeros(2), 1.5 * Psi.entries, df=7.0).logpdf(X[:, 0])
    assert np.isclose(log_density_matrix_t(p, X), ref, rtol=1e-10)


def test_wishart_mean_and_prefix():
    W = wishart_batch(3, 6.0, 40000, 2)
    se = W.std(0, ddof=1) / np.sqrt(len(W))
    assert np.all(np.abs(W.mean(0) - 6.0 * np.eye(3)) <= 4 * se + 1e-12)
    S = sample_wishart(3, 6.0, 2)
    assert isinstance(S, SymPD)


def test_inv_wishart_trace_moments_values():
    assert np.isclose(inv_wishart_trace_moments(2, 5)["m1"], 1.0)
    m = inv_wishart_trace_moments(2, 7)
    assert np.isclose(m["m2tr"], 0.3) and np.isclose(m["m1sq"], 0.4)
    with pytest.raises(ValidationError):
        inv_wishart_trace_moments(2, 3)


def test_inv_wishart_trace_moments_monte_carlo():
    for dim, alpha in ((2, 7.0), (3, 9.5)):
        W = wishart_batch(dim, alpha, 100000, 8, "check")
        Wi = np.linalg.inv(W)
        t1 = np.trace(Wi, axis1=1, axis2=2)
        vals = {"m1": t1, "m2tr": np.einsum("kij,kji->k", Wi, Wi), "m1sq": t1**2}
        for k, v in inv_wishart_trace_moments(dim, alpha).items():
            se = vals[k].std(ddof=1) / np.sqrt(len(t1))
            assert abs(vals[k].mean() - v) <= 4 * se, (dim, alpha, k)


def test_matrix_t_frobenius_moments_scalar_oracle():
    for n in (5.0, 8.0, 12.5, 40.0):
        m = matrix_t_frobenius_moments(1, 1, n)
        assert np.isclose(m["m2"], n / (n - 2), rtol=1e-14)
        assert np.isclose(m["m4"], 3 * n * n / ((n - 2) * (n - 4)), rtol=1e-14)
    assert matrix_t_frobenius_moments(1, 1, 4)["m2"] == 2.0
    assert matrix_t_frobenius_moments(1, 1, 8)["m4"] == pytest.approx(8.0, rel=1e-14)


def test_matrix_t_frobenius_moments_monte_carlo():
    m = matrix_t_frobenius_moments(2, 3, 10.0)
    T = sample_matrix_t(MatrixTParams(10.0, SymPD.identity(2), SymPD.identity(3)), 200000, 3)
    r2 = np.einsum("kij,kij->k", T.data, T.data)
    for key, v in (("m2", r2), ("m4", r2**2)):
        assert abs(v.mean() - m[key]) <= 4 * v.std(ddof=1) / np.sqrt(len(v)), key
    assert m["m2"] <= m["m2_bound"] and m["m4"] <= m["m4_bound"]


def test_batch_serialisation_round_trip(tmp_path):
    b = sample_matrix_normal(MatrixNormalParams.centered(SymPD.identity(2), SymPD.identity(3)), 17, 11)
    assert np.array_equal(SampleBatch.from_bytes(b.to_bytes()).data, b.data)
    assert SampleBatch.from_bytes(b.to_bytes()).seed == 11
    assert np.array_equal(SampleBatch.from_csv(b.to_csv()).data, b.data)
    for name in ("b.csv", "b.bin"):
        b.save(tmp_path / name)
        assert np.array_equal(SampleBatch.load(tmp_path / name).data, b.data)
    assert b.column_names()[:2] == ["x_1_1", "x_1_2"]


def test_batch_rejects_non_finite():
    with pytest.raises(ValidationError):
        SampleBatch(np.array([[[np.nan]]]))
