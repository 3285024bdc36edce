import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from rise.errors import ConfigError, DimensionError
from rise.theory import (
    LN2, GaussianSpec, LaplacePriors, TheorySettings, UnimodalModel, as_dist,
    check_risk_decomposition, check_sqrt_jsd_triangle, check_unimodal_sum_bound, draw_unimodal,
    estimate_synergy, js_divergence, js_rows, kl_gaussian, kl_sweep, laplace_kl_asymmetric,
    laplace_kl_symmetric, marginals, product, r_squared, relative_variation, rows_to_csv,
    run_claims,
)

probs = st.lists(st.floats(0, 1), min_size=2, max_size=8).filter(lambda v: sum(v) > 1e-3)


def normalise(v):
    v = np.asarray(v, float)
    return v / v.sum()


def random_pd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.5 * np.eye(d)


class TestGaussianKL:
    def test_identical_is_zero(self):
        g = GaussianSpec([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
        assert kl_gaussian(g, g) == 0.0

    def test_unit_covariance_mean_shift(self):
        mu = np.array([1.0, -2.0, 0.5])
        assert kl_gaussian(GaussianSpec(mu, 1.0), GaussianSpec(np.zeros(3), 1.0)) == pytest.approx(
            mu @ mu / 2, abs=1e-12)

    def test_diagonal_hand_formula(self):
        m1, m2 = np.array([0.3, -1.0]), np.array([1.0, 0.5])
        s1, s2 = np.array([0.5, 2.0]), np.array([1.5, 0.7])
        ref = 0.5 * np.sum(s1 / s2 + (m2 - m1) ** 2 / s2 - 1 + np.log(s2 / s1))
        assert kl_gaussian(GaussianSpec(m1, s1), GaussianSpec(m2, s2)) == pytest.approx(ref, abs=1e-12)

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        d = 3
        a = GaussianSpec(rng.standard_normal(d), random_pd(rng, d))
        b = GaussianSpec(rng.standard_normal(d), random_pd(rng, d))
        x = rng.multivariate_normal(a.mean, a.cov, size=1_000_000)
        ratio = multivariate_normal(a.mean, a.cov).logpdf(x) - multivariate_normal(b.mean, b.cov).logpdf(x)
        se = ratio.std() / math.sqrt(len(x))
        assert abs(kl_gaussian(a, b) - ratio.mean()) < 3 * se

    def test_validation(self):
        with pytest.raises(ConfigError):
            GaussianSpec([0, 0], [[1, 0], [0, 0]])
        with pytest.raises(ConfigError):
            GaussianSpec([0, 0], [[1, 0.5], [0.2, 1]])
        with pytest.raises(DimensionError):
            GaussianSpec([0, 0], np.eye(3))
        with pytest.raises(DimensionError):
            kl_gaussian(GaussianSpec([0], 1.0), GaussianSpec([0, 0], 1.0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2 ** 31))
    def test_non_negative(self, d, seed):
        rng = np.random.default_rng(seed)
        a = GaussianSpec(rng.standard_normal(d), random_pd(rng, d))
        b = GaussianSpec(rng.standard_normal(d), random_pd(rng, d))
        assert kl_gaussian(a, b) >= 0


class TestJSD:
    def test_equal_and_disjoint(self):
        p = np.array([0.2, 0.3, 0.5])
        assert js_divergence(p, p) == 0.0
        assert js_divergence([0.5, 0.5, 0, 0], [0, 0, 0.3, 0.7]) == pytest.approx(LN2, abs=1e-15)

    def test_against_entropy_form(self):
        # JSD = H(m) - (H(p) + H(q)) / 2
        rng = np.random.default_rng(1)
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        h = lambda v: -np.sum(v * np.log(v))
        ref = h((p + q) / 2) - (h(p) + h(q)) / 2
        assert js_divergence(p, q) == pytest.approx(ref, abs=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(probs, st.integers(0, 2 ** 31))
    def test_symmetric_and_bounded(self, p, seed):
        p = normalise(p)
        q = np.random.default_rng(seed).dirichlet(np.ones(p.size))
        a, b = js_divergence(p, q), js_divergence(q, p)
        assert a == b
        assert 0 <= a <= LN2

    def test_as_dist(self):
        as_dist([0.25, 0.75])
        with pytest.raises(ConfigError):
            as_dist([0.5, 0.6])
        with pytest.raises(ConfigError):
            as_dist([-0.1, 1.1])

    def test_rows_match_scalar(self):
        rng = np.random.default_rng(2)
        p, q = rng.dirichlet(np.ones(5), 20), rng.dirichlet(np.ones(5), 20)
        np.testing.assert_allclose(js_rows(p, q), [js_divergence(a, b) for a, b in zip(p, q)],
                                   atol=1e-15)


class TestTriangle:
    def test_identical(self):
        p = [0.1, 0.9]
        holds, slack = check_sqrt_jsd_triangle(p, p, p)
        assert holds and slack == 0.0

    def test_one_hot_combinations(self):
        basis = list(np.eye(3)) + [np.array([0.5, 0.5, 0.0]), np.array([1 / 3] * 3)]
        for p, q, g in itertools.product(basis, repeat=3):
            assert check_sqrt_jsd_triangle(p, q, g)[0]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_random_triples(self, seed):
        p, q, g = np.random.default_rng(seed).dirichlet(np.ones(8), 3)
        assert check_sqrt_jsd_triangle(p, q, g)[0]


class TestRiskDecomposition:
    def test_identical_joints(self):
        j = np.random.default_rng(3).dirichlet(np.ones(9)).reshape(3, 3)
        out = check_risk_decomposition(j, j)
        assert out.r_multi == 0.0 and out.risk1 == 0.0 and out.metric_holds

    def test_independent_equal_marginals(self):
        a, b = np.array([0.2, 0.5, 0.3]), np.array([0.6, 0.1, 0.3])
        j = np.outer(a, b)
        out = check_risk_decomposition(j, j.copy())
        assert out.risk1 == pytest.approx(0, abs=1e-15) and out.risk2 == pytest.approx(0, abs=1e-15)

    def test_marginals_and_product(self):
        j = np.random.default_rng(4).dirichlet(np.ones(24)).reshape(2, 3, 4)
        ms = marginals(j)
        assert [m.shape for m in ms] == [(2,), (3,), (4,)]
        np.testing.assert_allclose(ms[1], j.sum(axis=(0, 2)))
        p = product(ms)
        assert p.shape == j.shape and p.sum() == pytest.approx(1)

    def test_metric_form_random_sweep(self):
        rng = np.random.default_rng(5)
        for _ in range(2000):
            js, jt = rng.dirichlet(np.ones(9), 2).reshape(2, 3, 3)
            assert check_risk_decomposition(js, jt).metric_holds

    def test_additive_form_can_fail(self):
        # the additive form is reported only; a small search finds a violation
        rng = np.random.default_rng(6)
        found = any(not check_risk_decomposition(*rng.dirichlet(np.ones(9), 2).reshape(2, 3, 3)).additive_holds
                    for _ in range(200))
        assert found

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            check_risk_decomposition(np.full((2, 2), 0.25), np.full((3, 3), 1 / 9))


class TestUnimodalSum:
    def test_identical(self):
        m = [np.array([0.3, 0.7]), np.array([0.5, 0.5])]
        holds, metric, additive = check_unimodal_sum_bound(m, m)
        assert holds and metric == 0.0 and additive == 0.0

    def test_single_modality_equality(self):
        a, b = np.array([0.1, 0.9]), np.array([0.6, 0.4])
        holds, metric, additive = check_unimodal_sum_bound([a], [b])
        assert holds and abs(metric) < 1e-15 and abs(additive) < 1e-15

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_random_sweep(self, seed):
        rng = np.random.default_rng(seed)
        ms, mt = list(rng.dirichlet(np.ones(4), 3)), list(rng.dirichlet(np.ones(4), 3))
        assert check_unimodal_sum_bound(ms, mt)[0]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            check_unimodal_sum_bound([np.ones(2) / 2], [np.ones(2) / 2] * 2)


class TestLaplace:
    def test_symmetric_map_against_scipy(self):
        z, y = draw_unimodal(5, 3, UnimodalModel(n=400), np.random.default_rng(7))
        fit = laplace_kl_symmetric(z, y)
        nll = lambda b: np.logaddexp(0, -y * (z @ b)).sum() + b @ b / 2
        ref = minimize(nll, np.zeros(5), method="BFGS", options={"gtol": 1e-10}).x
        np.testing.assert_allclose(fit.map, ref, atol=1e-5)
        assert fit.grad_norm < 1e-8
        assert np.linalg.eigvalsh(fit.hessian).min() > 0

    def test_symmetric_kl_is_gaussian_kl(self):
        z, y = draw_unimodal(4, 2, UnimodalModel(n=300), np.random.default_rng(8))
        pri = LaplacePriors(sigma_beta2=2.0)
        fit = laplace_kl_symmetric(z, y, pri)
        ref = kl_gaussian(GaussianSpec(fit.map, np.linalg.inv(fit.hessian)), GaussianSpec(np.zeros(4), 2.0))
        assert fit.kl == pytest.approx(ref, rel=1e-9)

    def test_separable_one_dimensional_finite(self):
        z = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        fit = laplace_kl_symmetric(z, np.array([-1, -1, 1, 1]), LaplacePriors(sigma_beta2=0.1))
        assert 0 < fit.kl < np.inf

    def test_asymmetric_posterior_equals_prior(self):
        fit = laplace_kl_asymmetric(np.zeros((0, 3)), np.zeros(0))
        assert fit.map[0] == 1.0 and fit.kl == pytest.approx(0.0, abs=1e-15)

    def test_asymmetric_map_against_scipy(self):
        z, y = draw_unimodal(6, 4, UnimodalModel(n=500), np.random.default_rng(9))
        fit = laplace_kl_asymmetric(z, y)
        sq = (z * z).sum(1)
        nll = lambda r: np.logaddexp(0, -y * (sq - r[0])).sum() + (r[0] - 1) ** 2 / 2
        ref = minimize(nll, [1.0], method="BFGS", options={"gtol": 1e-10}).x
        assert fit.map[0] == pytest.approx(ref[0], abs=1e-5)
        h = fit.hessian[0, 0]
        ref_kl = kl_gaussian(GaussianSpec(fit.map, 1 / h), GaussianSpec([1.0], 1.0))
        assert fit.kl == pytest.approx(ref_kl, rel=1e-9)

    def test_draws_follow_model(self):
        model = UnimodalModel(n=4000)
        z, y = draw_unimodal(8, 3, model, np.random.default_rng(10))
        assert set(np.unique(y)) == {-1, 1}
        live = z[y == -1]
        assert abs(live.std() - model.sigma0) < 0.005

    def test_sweep_rows_and_csv(self):
        rows = kl_sweep("d", (4, 8), 2, UnimodalModel(n=500))
        assert [r["d"] for r in rows] == [4, 8] and all(r["K"] == 2 for r in rows)
        text = rows_to_csv(rows)
        assert text.splitlines()[0].startswith("variable,value,d,K,kl_sym,kl_asym")
        with pytest.raises(ConfigError):
            kl_sweep("n", (1,), 1)


class TestRegression:
    def test_r_squared(self):
        r2, slope = r_squared([1, 2, 3, 4], [2, 4, 6, 8])
        assert r2 == pytest.approx(1.0) and slope == pytest.approx(2.0)

    def test_relative_variation(self):
        assert relative_variation([9, 10, 11]) == pytest.approx(0.2)


class TestSynergy:
    def test_independent(self):
        rng = np.random.default_rng(11)
        est = estimate_synergy([rng.standard_normal((10_000, 3)), rng.standard_normal((10_000, 3))])
        assert abs(est.value) < 0.02 and not est.regularized

    def test_correlated_closed_form(self):
        rng = np.random.default_rng(12)
        rho, d, n = 0.99, 4, 10_000
        a = rng.standard_normal((n, d))
        b = rho * a + math.sqrt(1 - rho ** 2) * rng.standard_normal((n, d))
        est = estimate_synergy([a, b]).value
        ref = -0.5 * d * math.log(1 - rho ** 2)
        assert est > 2 and est == pytest.approx(ref, rel=0.03)

    def test_invariant_to_blockwise_linear_maps(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((5000, 3))
        b = 0.6 * a + rng.standard_normal((5000, 3))
        base = estimate_synergy([a, b]).value
        ta, tb = random_pd(rng, 3), rng.standard_normal((3, 3)) + 3 * np.eye(3)
        assert estimate_synergy([a @ ta, b @ tb]).value == pytest.approx(base, abs=1e-8)

    def test_singular_covariance_regularised(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((600, 2))
        est = estimate_synergy([a, a[:, :1]])
        assert est.regularized and est.ridge == 1e-6 and np.isfinite(est.value)

    def test_preconditions(self):
        with pytest.raises(ConfigError):
            estimate_synergy([np.zeros((100, 2)), np.zeros((100, 2))])
        with pytest.raises(DimensionError):
            estimate_synergy([np.zeros((600, 2)), np.zeros((700, 2))])


def test_claims_small_settings():
    s = TheorySettings(n_triples=2000, n_joints=2000, n_marginals=2000,
                       d_grid=(4, 8, 16), k_grid=(1, 2, 4), d_fixed=16)
    results, rows = run_claims(s)
    names = [r.claim for r in results]
    assert names == ["sqrt-jsd-triangle", "risk-decomposition-metric", "unimodal-sum-bound-metric",
                     "sym-kl-linear-in-d", "sym-kl-monotone-in-K", "asym-kl-flat-in-d", "asym-kl-flat-in-K"]
    assert all(r.passed for r in results[:3])
    assert len(rows) == 6
