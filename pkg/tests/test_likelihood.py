import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmsem import (
    DataSummary, fit_ml, gcm, implied_moments, info_e, info_j, loglik, obs_scores, sandwich,
    score_gcm, score_general, score_two_factor, simulate, spec_from_dict, true_theta, two_factor,
)
from rbmsem import numdiff
from rbmsem.likelihood import (
    LikelihoodEngine, NotPositiveDefiniteError, info_matrices, loglik_contributions, sandwich_se,
    score_blocks, score_numeric,
)

from conftest import admissible_points, saturated_spec
from oracles import fd_gradient, max_rel_error, mixed_model_loglik


class TestLoglik:
    def test_two_point_example(self, saturated):
        # y = (0, 2), mu = 0, variance 1
        assert loglik([0.0, 1.0], saturated, np.array([[0.0], [2.0]])) == pytest.approx(-np.log(2 * np.pi) - 2)

    def test_saturated_value(self, tf_data):
        spec = saturated_spec()
        y = tf_data[:, :1]
        summ = DataSummary.from_data(y)
        n = len(y)
        expected = -n / 2 * (np.log(2 * np.pi) + np.log(summ.s[0, 0]) + 1)
        assert loglik([summ.ybar[0], summ.s[0, 0]], spec, y) == pytest.approx(expected, rel=1e-14)

    def test_without_mean_structure_ignores_mean(self):
        spec = saturated_spec(mean_structure=False)
        y = np.array([[5.0], [7.0]])
        n = 2
        expected = -n / 2 * (np.log(2 * np.pi) + np.log(2.0) + 1.0 / 2.0)
        assert loglik([2.0], spec, y) == pytest.approx(expected, rel=1e-14)

    def test_large_sample_limit(self):
        spec = gcm()
        theta = true_theta(spec, "low").values
        n = 100_000
        y = simulate(spec, theta, n, seed=5)
        sigma = implied_moments(theta, spec).sigma
        limit = -0.5 * (spec.p * np.log(2 * np.pi) + np.linalg.slogdet(sigma)[1] + spec.p)
        assert loglik(theta, spec, y) / n == pytest.approx(limit, rel=5e-3)

    def test_not_pd_raises(self, gcm_spec, gcm_data):
        theta = true_theta(gcm_spec).values.copy()
        theta[5] = -1e4
        with pytest.raises(NotPositiveDefiniteError):
            loglik(theta, gcm_spec, gcm_data)

    def test_summary_and_array_agree(self, tf_spec, tf_data):
        theta = true_theta(tf_spec).values
        assert loglik(theta, tf_spec, DataSummary.from_data(tf_data)) == loglik(theta, tf_spec, tf_data)


class TestContributions:
    def test_sum(self, gcm_spec, gcm_data):
        theta = true_theta(gcm_spec).values
        contrib = loglik_contributions(theta, gcm_spec, gcm_data)
        assert contrib.sum() == pytest.approx(loglik(theta, gcm_spec, gcm_data), rel=1e-8)

    def test_identical_rows(self, gcm_spec):
        y = np.tile(np.arange(10.0), (3, 1))
        contrib = loglik_contributions(true_theta(gcm_spec).values, gcm_spec, y)
        assert contrib[0] == contrib[1] == contrib[2]

    def test_observation_at_mean(self):
        spec = saturated_spec()
        assert loglik_contributions([1.5, 1.0], spec, np.array([[1.5]]))[0] == pytest.approx(-0.5 * np.log(2 * np.pi))


class TestScoreBlocks:
    def test_vanish_at_saturation(self, saturated):
        y = np.array([[1.0], [4.0], [-2.0]])
        summ = DataSummary.from_data(y)
        blocks = score_blocks([summ.ybar[0], summ.s[0, 0]], saturated, y)
        assert blocks.l_mu[0] == pytest.approx(0, abs=1e-15)
        assert blocks.l_sigma[0, 0] == pytest.approx(0, abs=1e-15)

    def test_scalar_value(self, saturated):
        y = np.array([[-2.0], [2.0]])  # mean 0, S = 4
        blocks = score_blocks([0.0, 2.0], saturated, y)
        assert blocks.l_sigma[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_mean_direction(self):
        spec = spec_from_dict({"p": 3, "q": 1, "matrices": {
            "nu": [{"row": i, "col": 1, "free": f"n{i}"} for i in (1, 2, 3)],
            "theta": [{"row": i, "col": i, "free": f"t{i}"} for i in (1, 2, 3)],
        }})
        y = np.random.default_rng(0).normal(size=(6, 3)) + 10.0
        blocks = score_blocks([0.0, 1.0, 2.0, 1.0, 3.0, 0.5], spec, y)
        assert np.all(blocks.l_mu > 0)


class TestScores:
    @pytest.mark.parametrize("name", ["two_factor", "gcm"])
    def test_general_matches_finite_differences(self, name, tf_data, gcm_data):
        spec = two_factor() if name == "two_factor" else gcm()
        y = tf_data if name == "two_factor" else gcm_data
        eng = LikelihoodEngine(spec, y)
        worst = 0.0
        for theta in admissible_points(spec, true_theta(spec).values, 100, seed=21):
            fd = fd_gradient(lambda t: float(eng.loglik(t)[0]), theta)
            worst = max(worst, max_rel_error(eng.score(theta)[0], fd))
        assert worst < 1e-6

    def test_two_factor_closed_form(self, tf_spec, tf_data):
        summ = DataSummary.from_data(tf_data)
        for theta in admissible_points(tf_spec, true_theta(tf_spec).values, 100, seed=22):
            general = score_general(theta, tf_spec, summ)
            np.testing.assert_allclose(score_two_factor(theta, summ), general, rtol=1e-9, atol=1e-9 * np.abs(general).max())

    def test_gcm_closed_form(self, gcm_spec, gcm_data):
        summ = DataSummary.from_data(gcm_data)
        for theta in admissible_points(gcm_spec, true_theta(gcm_spec).values, 100, seed=23):
            general = score_general(theta, gcm_spec, summ)
            np.testing.assert_allclose(score_gcm(theta, summ), general, rtol=1e-9, atol=1e-9 * np.abs(general).max())

    def test_theta_score_is_half_n_lsigma(self, tf_spec, tf_data):
        theta = true_theta(tf_spec).values
        blocks = score_blocks(theta, tf_spec, tf_data)
        g = score_general(theta, tf_spec, tf_data)
        np.testing.assert_allclose(g[5:11], 0.5 * len(tf_data) * np.diag(blocks.l_sigma), rtol=1e-12)

    def test_zero_at_exact_moments(self, tf_spec, gcm_spec):
        for spec in (tf_spec, gcm_spec):
            theta = true_theta(spec).values
            mom = implied_moments(theta, spec)
            summ = DataSummary(n=50, ybar=mom.mu, s=mom.sigma)
            np.testing.assert_allclose(score_general(theta, spec, summ), 0, atol=1e-10)

    def test_gcm_alpha_score_zero_at_mean(self, gcm_spec):
        theta = true_theta(gcm_spec, "low").values.copy()
        theta[:2] = [3.0, -1.0]
        mom = implied_moments(theta, gcm_spec)
        summ = DataSummary(n=30, ybar=mom.mu, s=2 * mom.sigma)
        np.testing.assert_allclose(score_gcm(theta, summ)[:2], 0, atol=1e-10)

    def test_gcm_covariance_score_doubled(self, gcm_spec, gcm_data):
        theta = true_theta(gcm_spec, "low").values
        blocks = score_blocks(theta, gcm_spec, gcm_data)
        lam = gcm_spec.lambda_.fixed
        naive = 0.5 * len(gcm_data) * (lam.T @ blocks.l_sigma @ lam)[0, 1]
        assert score_gcm(theta, gcm_data)[4] == pytest.approx(2 * naive, rel=1e-12)
        fd = score_numeric(theta, gcm_spec, gcm_data)[4]
        assert fd == pytest.approx(2 * naive, rel=1e-6)

    def test_zero_at_ml_estimate(self, tf_spec, tf_data):
        fit = fit_ml(tf_spec, tf_data)
        assert np.max(np.abs(score_two_factor(fit.values, tf_data))) < 1e-5 * len(tf_data)


class TestInformation:
    def test_saturated_j_at_mle(self, saturated, tf_data):
        y = tf_data[:, 1:2]
        n = len(y)
        summ = DataSummary.from_data(y)
        v = summ.s[0, 0]
        j = info_j([summ.ybar[0], v], saturated, y)
        np.testing.assert_allclose(j, np.diag([n / v, n / (2 * v * v)]), rtol=1e-7, atol=1e-7 * n / v)

    def test_saturated_e_at_mle(self, saturated, tf_data):
        y = tf_data[:, 2]
        n = len(y)
        dev = y - y.mean()
        v, m3, m4 = np.mean(dev**2), np.mean(dev**3), np.mean(dev**4)
        e = info_e([y.mean(), v], saturated, y)
        expected = np.array([[n / v, n * m3 / (2 * v**3)], [n * m3 / (2 * v**3), n * (m4 - v * v) / (4 * v**4)]])
        np.testing.assert_allclose(e, expected, rtol=1e-10)

    @pytest.mark.parametrize("name", ["two_factor", "gcm"])
    def test_j_pd_at_ml(self, name, tf_data, gcm_data):
        spec = two_factor() if name == "two_factor" else gcm()
        y = tf_data if name == "two_factor" else gcm_data
        fit = fit_ml(spec, y)
        assert np.linalg.eigvalsh(info_j(fit.values, spec, y)).min() > 0

    def test_j_doubles_on_stacked_data(self, tf_spec, tf_data):
        theta = true_theta(tf_spec).values
        j1 = info_j(theta, tf_spec, tf_data)
        j2 = info_j(theta, tf_spec, np.vstack([tf_data, tf_data]))
        np.testing.assert_allclose(j2, 2 * j1, rtol=1e-8, atol=1e-8 * np.abs(j1).max())

    def test_hessian_symmetry_before_symmetrizing(self, tf_spec, tf_data, gcm_spec, gcm_data):
        for spec, y in ((tf_spec, tf_data), (gcm_spec, gcm_data)):
            h = info_j(true_theta(spec).values, spec, y, symmetrize=False)
            assert np.abs(h - h.T).max() / np.abs(h).max() < 1e-6

    def test_j_two_routes(self, gcm_spec, gcm_data):
        theta = true_theta(gcm_spec).values
        by_score = info_j(theta, gcm_spec, gcm_data, method="score")
        by_loglik = info_j(theta, gcm_spec, gcm_data, method="loglik")
        np.testing.assert_allclose(by_score, by_loglik, rtol=1e-3, atol=1e-4 * np.abs(by_score).max())

    def test_e_rank_one_for_single_observation(self, gcm_spec, gcm_data):
        e = info_e(true_theta(gcm_spec).values, gcm_spec, gcm_data[:1])
        assert np.linalg.matrix_rank(e, tol=1e-10 * np.abs(e).max()) == 1

    def test_e_psd(self, tf_spec, tf_data):
        for theta in admissible_points(tf_spec, true_theta(tf_spec).values, 10, seed=7):
            e = info_e(theta, tf_spec, tf_data)
            assert np.linalg.eigvalsh(e).min() >= -1e-8 * np.abs(e).max()

    @pytest.mark.parametrize("name", ["two_factor", "gcm"])
    def test_per_observation_scores_two_routes(self, name, tf_data, gcm_data):
        spec = two_factor() if name == "two_factor" else gcm()
        y = tf_data if name == "two_factor" else gcm_data
        theta = admissible_points(spec, true_theta(spec).values, 1, seed=9)[0]
        analytic = obs_scores(theta, spec, y)
        numeric = obs_scores(theta, spec, y, method="numeric")
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-6 * np.abs(analytic).max())
        np.testing.assert_allclose(analytic.sum(axis=0), score_general(theta, spec, y), rtol=1e-9,
                                   atol=1e-9 * np.abs(analytic).max())


class TestSandwich:
    def test_collapses_when_e_equals_j(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        j = a @ a.T + 4 * np.eye(4)
        np.testing.assert_allclose(sandwich(j, j), np.linalg.inv(j), rtol=1e-12)

    def test_normal_mean(self):
        spec = saturated_spec()
        y = np.random.default_rng(4).normal(3.0, 2.0, size=10_000)
        v = y.var()
        se = sandwich_se([y.mean(), v], spec, y)
        assert se[0] == pytest.approx(np.sqrt(v / len(y)), rel=0.05)

    def test_shrinks_on_duplicated_data(self, tf_spec, tf_data):
        fit = fit_ml(tf_spec, tf_data)
        se1 = sandwich_se(fit.values, tf_spec, tf_data)
        se2 = sandwich_se(fit.values, tf_spec, np.vstack([tf_data, tf_data]))
        np.testing.assert_allclose(se2, se1 / np.sqrt(2), rtol=1e-6)

    def test_info_matrices_consistent(self, gcm_spec, gcm_data):
        theta = true_theta(gcm_spec).values
        mats = info_matrices(theta, gcm_spec, gcm_data)
        np.testing.assert_allclose(mats.sandwich, mats.sandwich.T)
        jinv = np.linalg.inv(mats.j)
        np.testing.assert_allclose(mats.sandwich, jinv @ mats.e @ jinv, rtol=1e-8)


class TestInvariances:
    def test_translation_changes_only_intercept(self, tf_data):
        spec = two_factor(mean_structure=True)
        shifted = tf_data.copy()
        shifted[:, 2] += 5.0
        a = fit_ml(spec, tf_data)
        b = fit_ml(spec, shifted)
        diff = b.values - a.values
        assert diff[2] == pytest.approx(5.0, abs=1e-6)
        np.testing.assert_allclose(np.delete(diff, 2), 0, atol=1e-5)

    def test_centred_surface_unchanged(self, tf_spec, tf_data):
        shifted = tf_data + np.array([1.0, -2.0, 3.0, 0.5, 10.0, -7.0])
        for theta in admissible_points(tf_spec, true_theta(tf_spec).values, 5, seed=8):
            assert loglik(theta, tf_spec, shifted) == pytest.approx(loglik(theta, tf_spec, tf_data), abs=1e-10)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_gcm_equals_mixed_model(self, seed):
        spec = gcm()
        y = simulate(spec, true_theta(spec, "low").values, 20, seed=seed)
        theta = admissible_points(spec, true_theta(spec, "low").values, 1, seed=seed)[0]
        theta[:2] = [1.0, 0.5]
        psi = np.array([[theta[2], theta[4]], [theta[4], theta[3]]])
        if np.linalg.eigvalsh(psi).min() <= 0:
            psi_ok = np.array([[275.0, 20.0], [20.0, 50.0]])
            theta[2], theta[3], theta[4] = psi_ok[0, 0], psi_ok[1, 1], psi_ok[0, 1]
            psi = psi_ok
        lam = spec.lambda_.fixed
        direct = mixed_model_loglik(y - lam @ theta[:2], psi, theta[5])
        assert loglik(theta, spec, y) == pytest.approx(direct, abs=1e-8)


def test_numdiff_hessian_quadratic():
    a = np.array([[3.0, 1.0], [1.0, 2.0]])
    h = numdiff.hessian(lambda x: 0.5 * x @ a @ x, np.array([0.3, -0.7]))
    np.testing.assert_allclose(h, a, rtol=1e-6)
