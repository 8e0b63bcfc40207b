import math

import numpy as np
import pytest

from coupled_is.models import (LogRegModel, add_intercept, blr_optimal_marginals, blr_posterior,
                               blr_predictive_truth, blr_problem, logreg_grad_log_unnorm_posterior,
                               logreg_log_unnorm_posterior, logreg_problem, make_blr,
                               make_blr_data, make_corrupted_test, make_logreg_data)


class TestBlr:
    def test_no_data_returns_prior(self):
        m = make_blr(np.zeros((0, 2)), np.zeros(0), 1.0, prior_mean=[1.0, 2.0],
                     prior_cov=[[2.0, 0.1], [0.1, 1.0]])
        post = blr_posterior(m)
        assert np.allclose(post.mean, [1.0, 2.0]) and np.allclose(post.cov, m.prior.cov)

    def test_scalar_example(self):
        m = make_blr([[1.0]], [2.0], 1.0)
        post = blr_posterior(m)
        assert post.cov[0, 0] == pytest.approx(0.5)
        assert post.mean[0] == pytest.approx(1.0)
        assert blr_predictive_truth(m, [1.0], 1.0) == pytest.approx(
            1 / math.sqrt(2 * math.pi * 1.5), rel=1e-12)
        assert 1 / math.sqrt(2 * math.pi * 1.5) == pytest.approx(0.325735, abs=1e-6)

    def test_zero_covariate_predictive(self, rng):
        m, _ = make_blr_data(rng, 5, 3, sigma2=0.7)
        val = blr_predictive_truth(m, np.zeros(3), 0.4)
        assert val == pytest.approx(math.exp(-0.5 * 0.16 / 0.7) / math.sqrt(2 * math.pi * 0.7))

    def test_sequential_equals_batch(self, rng):
        m, _ = make_blr_data(rng, 8, 3, sigma2=0.5)
        seq = make_blr(np.zeros((0, 3)), np.zeros(0), 0.5)
        for i in range(8):
            prior = blr_posterior(seq.with_data(m.X[i:i + 1], m.y[i:i + 1]))
            seq = type(m)(np.zeros((0, 3)), np.zeros(0), 0.5, prior)
        batch = blr_posterior(m)
        assert np.allclose(seq.prior.mean, batch.mean, atol=1e-10)
        assert np.allclose(seq.prior.cov, batch.cov, atol=1e-10)

    def test_optimal_marginals(self, rng):
        m, _ = make_blr_data(rng, 6, 2)
        xt, yt = np.array([0.3, -1.0]), 0.8
        q1s, q2s = blr_optimal_marginals(m, xt, yt)
        aug = blr_posterior(m.with_data(xt[None, :], [yt]))
        assert np.allclose(q1s.mean, aug.mean, atol=1e-12)
        assert np.allclose(q1s.cov, aug.cov, atol=1e-12)
        assert np.allclose(q2s.mean, blr_posterior(m).mean)

    def test_problem_log_z_and_optimal_densities(self, rng):
        m, _ = make_blr_data(rng, 6, 2)
        xt, yt = np.array([0.3, -1.0]), 0.8
        prob = blr_problem(m, xt, yt)
        q1s, q2s = blr_optimal_marginals(m, xt, yt)
        mu = blr_predictive_truth(m, xt, yt)
        th = rng.standard_normal((10, 2))
        # p~ / Z = q2*,  p~ f / (Z mu) = q1*
        assert np.allclose(prob.log_den(th) - prob.log_z, q2s.logpdf(th), atol=1e-10)
        assert np.allclose(prob.log_num(th) - prob.log_z - np.log(mu), q1s.logpdf(th), atol=1e-10)

    def test_gradients(self, rng):
        m, _ = make_blr_data(rng, 6, 2)
        prob = blr_problem(m, [0.3, -1.0], 0.8)
        th = rng.standard_normal(2)
        h = 1e-6
        for fn, g in ((prob.log_p_tilde, prob.grad_log_p_tilde), (prob.log_f, prob.grad_log_f)):
            fd = [(fn((th + h * e)[None])[0] - fn((th - h * e)[None])[0]) / (2 * h)
                  for e in np.eye(2)]
            assert np.allclose(g(th[None])[0], fd, rtol=1e-6)


class TestLogReg:
    def test_theta_zero(self):
        m, _ = make_logreg_data(0, 7, 3)
        val = logreg_log_unnorm_posterior(m, np.zeros(4))[0]
        assert val == pytest.approx(7 * math.log(0.5) - 2 * math.log(2 * math.pi))

    def test_single_datum(self):
        m = LogRegModel(np.array([[1.0]]), np.array([1.0]))
        val = logreg_log_unnorm_posterior(m, [0.0])[0]
        assert val == pytest.approx(math.log(0.5) - 0.5 * math.log(2 * math.pi))

    def test_overflow_safe(self):
        m = LogRegModel(np.array([[1.0]]), np.array([0.0]))
        val = logreg_log_unnorm_posterior(m, [800.0])[0]
        assert np.isfinite(val) and val == pytest.approx(-800 - 0.5 * 800**2
                                                         - 0.5 * math.log(2 * math.pi))

    def test_gradient(self, rng):
        m, _ = make_logreg_data(rng, 10, 4)
        th = rng.standard_normal(5)
        h = 1e-6
        fd = [(logreg_log_unnorm_posterior(m, th + h * e)[0]
               - logreg_log_unnorm_posterior(m, th - h * e)[0]) / (2 * h) for e in np.eye(5)]
        assert np.allclose(logreg_grad_log_unnorm_posterior(m, th)[0], fd, rtol=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            LogRegModel(np.ones((2, 2)), np.array([0.0, 2.0]))
        with pytest.raises(ValueError):
            LogRegModel(np.zeros((2, 2)), np.array([0.0, 1.0]))

    def test_corrupted_test_points(self, rng):
        m, _ = make_logreg_data(rng, 10, 3)
        rows = make_corrupted_test(m, rng, 100000)
        assert np.all(rows[:, 0] == 1)
        loc = m.X[:, 1:].mean(axis=0)
        # t(3) has variance 3 * scale^2 = 30 per coordinate
        se = math.sqrt(30 / 100000)
        assert np.all(np.abs(rows[:, 1:].mean(axis=0) - loc) < 4 * se)
        assert make_corrupted_test(m, rng, 10).shape == (10, 4)
        with pytest.raises(ValueError):
            make_corrupted_test(m, rng, 0)

    def test_heavy_tails_smoke(self, rng):
        m, _ = make_logreg_data(rng, 10, 1)
        kurt = []
        for _ in range(5):
            x = make_corrupted_test(m, rng, 20000)[:, 1]
            x = x - x.mean()
            kurt.append((x**4).mean() / (x**2).mean() ** 2)
        # infinite population kurtosis: batch values are large and erratic
        assert max(kurt) > 6

    def test_predictive_f_bounded(self, rng):
        m, th = make_logreg_data(rng, 10, 3)
        Xt = make_corrupted_test(m, rng, 10)
        prob = logreg_problem(m, Xt, (rng.random(10) < 0.5).astype(float))
        f = np.exp(prob.log_f(rng.standard_normal((1000, 4)) * 3))
        assert np.all(f > 0) and np.all(f <= 1)

    def test_add_intercept(self):
        assert np.array_equal(add_intercept([[2.0, 3.0]]), [[1.0, 2.0, 3.0]])
