import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmsem import (
    NONNORMAL, BoundsPolicy, DataSummary, FitResult, check_acceptable, default_bounds, fit_erbm, fit_irbm, fit_ml,
    gcm, implied_moments, rbm_penalty, simulate, spec_from_dict, true_theta, two_factor,
)
from rbmsem.estimators import rbm_penalty_gradient, start_values
from rbmsem.estimators.ml import StartValueError
from rbmsem.likelihood import LikelihoodEngine, PenaltyError

from conftest import saturated_spec


def known_variance_spec():
    return spec_from_dict({"p": 1, "q": 1, "matrices": {
        "nu": [{"row": 1, "col": 1, "free": "mu"}],
        "theta": [{"row": 1, "col": 1, "fixed": 1.0}],
    }})


def saturated_multivariate_spec(p):
    return spec_from_dict({"p": p, "q": 1, "matrices": {
        "nu": [{"row": i + 1, "col": 1, "free": f"n{i}"} for i in range(p)],
        "theta": [{"row": i + 1, "col": j + 1, "free": f"t{i}{j}"} for i in range(p) for j in range(i + 1)],
    }})


class SaturatedOracle:
    """Closed-form pieces of the univariate normal model in (mean, variance)."""

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.n = len(self.y)

    def loglik(self, mu, v):
        r = self.y - mu
        return -0.5 * (self.n * np.log(2 * np.pi * v) + np.sum(r * r) / v)

    def j(self, mu, v):
        r = self.y - mu
        n = self.n
        return np.array([
            [n / v, np.sum(r) / v**2],
            [np.sum(r) / v**2, -n / (2 * v**2) + np.sum(r * r) / v**3],
        ])

    def e(self, mu, v):
        r = self.y - mu
        s_mu = r / v
        s_v = (r * r - v) / (2 * v * v)
        scores = np.column_stack([s_mu, s_v])
        return scores.T @ scores

    def penalty(self, mu, v):
        return -0.5 * np.trace(np.linalg.solve(self.j(mu, v), self.e(mu, v)))

    def objective(self, mu, v):
        return self.loglik(mu, v) + self.penalty(mu, v)

    def penalty_gradient(self, mu, v, h=1e-5):
        return np.array([
            (self.penalty(mu + h, v) - self.penalty(mu - h, v)) / (2 * h),
            (self.penalty(mu, v + h * v) - self.penalty(mu, v - h * v)) / (2 * h * v),
        ])

    def grid_maximum(self, rounds=14, size=41):
        """Zooming grid search for the maximizer of loglik + penalty."""
        mean, var = self.y.mean(), self.y.var()
        mu_lo, mu_hi = mean - 3 * np.sqrt(var / self.n), mean + 3 * np.sqrt(var / self.n)
        v_lo, v_hi = 0.5 * var, 1.8 * var
        for _ in range(rounds):
            mus = np.linspace(mu_lo, mu_hi, size)
            vs = np.linspace(v_lo, v_hi, size)
            vals = np.array([[self.objective(m, v) for v in vs] for m in mus])
            i, k = np.unravel_index(np.argmax(vals), vals.shape)
            dm, dv = 2 * (mus[1] - mus[0]), 2 * (vs[1] - vs[0])
            mu_lo, mu_hi = mus[i] - dm, mus[i] + dm
            v_lo, v_hi = vs[k] - dv, vs[k] + dv
        return mus[i], vs[k]


class TestFitML:
    def test_saturated_recovers_moments(self, tf_data):
        spec = saturated_multivariate_spec(3)
        y = tf_data[:, :3]
        fit = fit_ml(spec, y)
        summ = DataSummary.from_data(y)
        assert fit.converged
        np.testing.assert_allclose(fit.values[:3], summ.ybar, atol=1e-8)
        mom = implied_moments(fit.values, spec)
        np.testing.assert_allclose(mom.sigma, summ.s, atol=1e-8)

    def test_two_factor_intercepts_are_means(self, tf_spec, tf_data):
        fit = fit_ml(tf_spec, tf_data)
        np.testing.assert_allclose(fit.nu_hat, tf_data.mean(axis=0), rtol=0, atol=0)
        with_means = fit_ml(two_factor(mean_structure=True), tf_data)
        np.testing.assert_allclose(with_means.values[:6], tf_data.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(with_means.values[6:], fit.values, rtol=1e-5, atol=1e-6)

    def test_gcm_consistency(self):
        spec = gcm()
        truth = true_theta(spec, "high").values
        y = simulate(spec, truth, 1000, seed=2024)
        fit = fit_ml(spec, y)
        assert fit.acceptable
        assert np.all(np.abs(fit.values - truth) < 3 * fit.se)

    def test_deterministic(self, gcm_spec, gcm_data):
        a = fit_ml(gcm_spec, gcm_data, seed=3)
        b = fit_ml(gcm_spec, gcm_data, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.se, b.se)

    def test_stationary_and_bounded(self, tf_spec, tf_data):
        fit = fit_ml(tf_spec, tf_data)
        bounds = default_bounds(tf_spec, tf_data)
        assert bounds.contains(fit.values)
        assert fit.estimator == "ML" and fit.penalty == 0
        assert fit.iterations > 0 and fit.wall_time > 0

    def test_infeasible_start_raises(self, gcm_spec, gcm_data):
        start = true_theta(gcm_spec).values.copy()
        start[4] = 5000.0  # Psi far from positive definite
        with pytest.raises(StartValueError):
            fit_ml(gcm_spec, gcm_data, start=start)

    def test_explicit_start(self, gcm_spec, gcm_data):
        fit = fit_ml(gcm_spec, gcm_data, start=true_theta(gcm_spec).values)
        ref = fit_ml(gcm_spec, gcm_data)
        assert fit.converged
        assert fit.loglik == pytest.approx(ref.loglik, rel=1e-9)

    def test_serializes(self, gcm_spec, gcm_data):
        doc = json.loads(fit_ml(gcm_spec, gcm_data).to_json())
        assert set(doc) >= {"estimator", "theta_hat", "se", "loglik", "penalty", "converged", "acceptable",
                            "rejection_reason", "iterations", "wall_time"}
        assert doc["theta_hat"]["psi11"] > 0


class TestPenalty:
    def test_known_variance_mean(self):
        y = np.random.default_rng(1).normal(size=25)
        spec = known_variance_spec()
        for mu in (-0.5, 0.0, 0.3):
            expected = -np.sum((y - mu) ** 2) / (2 * len(y))
            assert rbm_penalty([mu], spec, y) == pytest.approx(expected, rel=1e-7)

    def test_e_equal_j_gives_minus_half_m(self, gcm_spec, gcm_data):
        eng = LikelihoodEngine(gcm_spec, gcm_data)
        eng.outer_scores = eng.neg_hessian
        assert rbm_penalty(true_theta(gcm_spec).values, gcm_spec, eng) == pytest.approx(-gcm_spec.m / 2, rel=1e-12)

    def test_saturated_closed_form(self, saturated):
        y = np.random.default_rng(2).normal(1.0, 2.0, size=40)
        oracle = SaturatedOracle(y)
        for mu, v in ((1.0, 4.0), (0.7, 3.1), (1.4, 5.2)):
            assert rbm_penalty([mu, v], saturated, y) == pytest.approx(oracle.penalty(mu, v), rel=1e-7)

    def test_gradient_two_routes(self, saturated):
        y = np.random.default_rng(3).normal(size=30)
        oracle = SaturatedOracle(y)
        got = rbm_penalty_gradient([0.1, 0.9], saturated, y)
        np.testing.assert_allclose(got, oracle.penalty_gradient(0.1, 0.9), rtol=1e-5, atol=1e-7)

    @given(st.permutations(list(range(30))))
    @settings(max_examples=10, deadline=None)
    def test_permutation_invariance(self, order):
        spec = gcm()
        y = simulate(spec, true_theta(spec).values, 30, seed=4)
        theta = true_theta(spec).values
        a = rbm_penalty(theta, spec, y)
        assert rbm_penalty(theta, spec, y[list(order)]) == pytest.approx(a, rel=1e-8)


class TestERBM:
    def test_zero_adjustment(self, gcm_spec, gcm_data, monkeypatch):
        ml = fit_ml(gcm_spec, gcm_data)
        monkeypatch.setattr(LikelihoodEngine, "penalty_and_gradient",
                            lambda self, theta, require_pd=False: (0.0, np.zeros(len(theta))))
        fit = fit_erbm(gcm_spec, gcm_data, ml=ml)
        np.testing.assert_array_equal(fit.values, ml.values)

    def test_saturated_one_step(self, saturated):
        y = np.random.default_rng(5).normal(0.0, 1.5, size=30)
        oracle = SaturatedOracle(y)
        mu, v = y.mean(), y.var()
        one_step = np.array([mu, v]) + np.linalg.solve(oracle.j(mu, v), oracle.penalty_gradient(mu, v))
        fit = fit_erbm(saturated, y)
        np.testing.assert_allclose(fit.values, one_step, rtol=1e-6, atol=1e-8)
        n = len(y)
        assert fit.values[1] == pytest.approx(v * (n + 1) / n, rel=1e-7)

    def test_records_penalty_at_ml(self, gcm_spec, gcm_data):
        fit = fit_erbm(gcm_spec, gcm_data)
        assert fit.penalty == 0
        assert np.isfinite(fit.info["ml_penalty"])
        assert fit.estimator == "eRBM" and fit.converged

    def test_close_to_irbm_at_rate_n_squared(self):
        spec = gcm()
        big = simulate(spec, true_theta(spec, "high").values, 800, seed=[99, 0])
        ns = np.array([50, 200, 800])
        gaps = []
        for n in ns:
            y = big[:n]
            ml = fit_ml(spec, y)
            gaps.append(np.max(np.abs(fit_erbm(spec, y, ml=ml).values - fit_irbm(spec, y, ml=ml).values)))
        slope = np.polyfit(np.log(ns), np.log(gaps), 1)[0]
        assert -2.5 <= slope <= -1.5


class TestIRBM:
    def test_known_variance_mean_is_sample_mean(self):
        y = np.random.default_rng(6).normal(2.0, 1.0, size=40)
        fit = fit_irbm(known_variance_spec(), y)
        assert fit.values[0] == pytest.approx(y.mean(), abs=1e-7)

    @pytest.mark.parametrize("n", [20, 50, 200])
    def test_saturated_against_grid_search(self, saturated, n):
        y = np.random.default_rng(100 + n).normal(0.0, 1.0, size=n)
        oracle = SaturatedOracle(y)
        mu_grid, v_grid = oracle.grid_maximum()
        fit = fit_irbm(saturated, y)
        assert fit.values[0] == pytest.approx(mu_grid, abs=1e-6)
        assert fit.values[1] == pytest.approx(v_grid, rel=1e-6)
        s = y.var()
        assert abs(fit.values[1] - s * (n + 1) / n) <= 10 * s / n**2
        assert fit.penalty == pytest.approx(oracle.penalty(*fit.values), rel=1e-6)

    def test_objective_not_below_ml_point(self, tf_spec, tf_data):
        ml = fit_ml(tf_spec, tf_data)
        fit = fit_irbm(tf_spec, tf_data, ml=ml)
        eng = LikelihoodEngine(tf_spec, tf_data)

        def objective(theta):
            return eng.loglik(theta)[0] + eng.penalty(theta)[0]

        assert objective(fit.values) >= objective(ml.values) - 1e-9

    def test_large_n_close_to_ml(self):
        spec = gcm()
        y = simulate(spec, true_theta(spec, "high").values, 1000, seed=77)
        ml = fit_ml(spec, y)
        fit = fit_irbm(spec, y, ml=ml)
        scale = np.maximum(np.abs(ml.values), 1.0)
        assert np.max(np.abs(fit.values - ml.values) / scale) < 5e-3

    def test_same_se_formula(self, gcm_spec, gcm_data):
        from rbmsem.likelihood import sandwich_se
        fit = fit_irbm(gcm_spec, gcm_data)
        np.testing.assert_allclose(fit.se, sandwich_se(fit.values, gcm_spec, gcm_data), rtol=1e-10)
        assert np.all(fit.se > 0)


class TestAcceptability:
    def _fit(self, spec, se):
        theta = true_theta(spec)
        return FitResult("ML", theta, np.asarray(se, float), -1.0, converged=True)

    def test_se_threshold_two_factor(self, tf_spec):
        se = np.full(tf_spec.m, 0.1)
        se[3] = 6.0
        fit = check_acceptable(self._fit(tf_spec, se), tf_spec)
        assert not fit.acceptable and fit.rejection_reason == "se_out_of_range"

    def test_negative_psi_eigenvalue(self, tf_spec):
        theta = true_theta(tf_spec).values.copy()
        theta[11] = -3.0
        fit = FitResult("eRBM", tf_spec.param_vector(theta), np.full(tf_spec.m, 0.1), -1.0, converged=True)
        fit = check_acceptable(fit, tf_spec)
        assert fit.rejection_reason == "sigma_not_pd"

    def test_all_pass(self, gcm_spec):
        fit = check_acceptable(self._fit(gcm_spec, np.full(gcm_spec.m, 10.0)), gcm_spec)
        assert fit.acceptable and fit.rejection_reason == "none"

    def test_gcm_threshold(self, gcm_spec):
        se = np.full(gcm_spec.m, 10.0)
        se[2] = 499.0
        assert check_acceptable(self._fit(gcm_spec, se), gcm_spec).acceptable
        se[2] = 500.0
        assert not check_acceptable(self._fit(gcm_spec, se), gcm_spec).acceptable

    def test_no_convergence_first(self, tf_spec):
        fit = self._fit(tf_spec, np.full(tf_spec.m, 9.0))
        fit.converged = False
        assert check_acceptable(fit, tf_spec).rejection_reason == "no_convergence"

    def test_nan_se_rejected(self, tf_spec):
        se = np.full(tf_spec.m, 0.1)
        se[0] = np.nan
        assert check_acceptable(self._fit(tf_spec, se), tf_spec).rejection_reason == "se_out_of_range"

    def test_explicit_threshold(self, tf_spec):
        fit = self._fit(tf_spec, np.full(tf_spec.m, 0.5))
        assert not check_acceptable(fit, tf_spec, threshold=0.4).acceptable


class TestBounds:
    def test_unit_variances(self, tf_spec):
        bounds = default_bounds(tf_spec, DataSummary(n=50, ybar=np.zeros(6), s=np.eye(6)))
        var = tf_spec.variance_mask
        np.testing.assert_array_equal(bounds.lower[var], 0.0)
        np.testing.assert_array_equal(bounds.upper[var], 2.0)

    def test_gcm_residual_upper(self, gcm_spec):
        theta = true_theta(gcm_spec, "low")
        mom = implied_moments(theta, gcm_spec)
        bounds = default_bounds(gcm_spec, DataSummary(n=50, ybar=mom.mu, s=mom.sigma))
        assert bounds.upper[5] == pytest.approx(3150.0)

    @pytest.mark.parametrize("name", ["two_factor", "gcm"])
    @pytest.mark.parametrize("rel", ["high", "low"])
    def test_contain_truth(self, name, rel):
        spec = two_factor() if name == "two_factor" else gcm()
        theta = true_theta(spec, rel)
        mom = implied_moments(theta, spec)
        bounds = default_bounds(spec, DataSummary(n=50, ybar=mom.mu, s=mom.sigma))
        assert bounds.contains(theta.values)
        assert np.all(np.isfinite(bounds.lower)) and np.all(np.isfinite(bounds.upper))

    def test_zero_variance_indicator(self, tf_spec, tf_data):
        y = tf_data.copy()
        y[:, 2] = 1.0
        with pytest.raises(ValueError):
            default_bounds(tf_spec, y)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            BoundsPolicy(np.array([1.0]), np.array([0.0]))
        with pytest.raises(ValueError):
            BoundsPolicy(np.array([0.0]), np.array([np.inf]))

    def test_start_values_inside(self, gcm_spec, gcm_data):
        bounds = default_bounds(gcm_spec, gcm_data)
        assert bounds.contains(start_values(gcm_spec, DataSummary.from_data(gcm_data), bounds))


def test_irbm_recovers_from_undefined_start():
    # an acceptable ML fit at which the guarded penalized objective is undefined
    spec = two_factor()
    y = simulate(spec, true_theta(spec, "low").values, 15, NONNORMAL, seed=np.random.SeedSequence([20240, 3, 15]))
    eng = LikelihoodEngine(spec, y)
    ml = fit_ml(spec, y, engine=eng)
    assert ml.acceptable
    with pytest.raises(PenaltyError):
        eng.penalty_and_gradient(ml.values, require_pd=True)
    fit = fit_irbm(spec, y, ml=ml)
    assert fit.converged and fit.acceptable
    assert np.linalg.eigvalsh(eng.neg_hessian(fit.values)[0])[0] > 0
    bounds = default_bounds(spec, eng.summary)
    free = (fit.values > bounds.lower + 1e-8) & (fit.values < bounds.upper - 1e-8)
    pen, pgrad = eng.penalty_and_gradient(fit.values)
    grad = eng.score(fit.values)[0] + pgrad
    # stationary on the optimizer's scale: gradient per observation times parameter size
    size = np.maximum(np.abs(fit.values), 0.01 * (bounds.upper - bounds.lower))
    assert np.max(np.abs(grad * size)[free]) / len(y) < 1e-4
