import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtri

from coupled_is.coupling import (GaussianCoupling, GaussianCouplingParams, IndependentCoupling,
                                 MixtureCoupling, SignCoupling, antithetic, coupling_from_json,
                                 crn, orthogonal_from_skew, stratified_counts)


def all_couplings(d, rng):
    params = GaussianCouplingParams(np.tril(rng.standard_normal((d, d)), -1),
                                    np.tril(rng.standard_normal((d, d)), -1),
                                    rng.standard_normal(d))
    g = GaussianCoupling.from_params(params)
    return [crn(d), antithetic(d), SignCoupling([1, -1, 1][:d]), IndependentCoupling(d), g,
            MixtureCoupling([0.3, 0.7], [g, antithetic(d)])]


class TestOrthogonal:
    def test_zero(self):
        assert np.array_equal(orthogonal_from_skew(np.zeros((3, 3))), np.eye(3))

    def test_rotation(self):
        th = 0.3
        A = np.array([[0.0, 0.0], [th, 0.0]])
        Q = orthogonal_from_skew(A)
        want = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        assert np.allclose(Q, want, atol=1e-12)
        assert np.allclose(Q, [[0.95533, -0.29552], [0.29552, 0.95533]], atol=1e-5)

    def test_random_5d(self, rng):
        Q = orthogonal_from_skew(rng.standard_normal((5, 5)) * 2)
        assert np.allclose(Q.T @ Q, np.eye(5), atol=1e-10)
        assert np.linalg.det(Q) == pytest.approx(1.0)


class TestSampling:
    def test_uniform_marginals(self, rng):
        crit = 0.001
        for c in all_couplings(3, rng):
            u1, u2 = c.sample_pair(rng, 100000)
            for j in range(3):
                assert stats.kstest(u1[:, j], "uniform").pvalue > crit, c
                assert stats.kstest(u2[:, j], "uniform").pvalue > crit, c

    def test_crn_and_antithetic(self, rng):
        u1, u2 = crn(2).sample_pair(rng, 1000)
        assert np.array_equal(u1, u2)
        u1, u2 = antithetic(2).sample_pair(rng, 1000)
        assert np.allclose(u2, 1 - u1, atol=1e-15)

    def test_gaussian_identity_is_crn(self, rng):
        u1, u2 = GaussianCoupling.from_matrix(np.eye(3)).sample_pair(rng, 1000)
        assert np.array_equal(u1, u2)

    def test_gaussian_minus_identity_is_antithetic(self, rng):
        u1, u2 = GaussianCoupling.from_matrix(-np.eye(3)).sample_pair(rng, 1000)
        assert np.allclose(u2, 1 - u1, atol=1e-15)

    def test_gaussian_zero_is_uncorrelated(self, rng):
        u1, u2 = GaussianCoupling.from_matrix(np.zeros((2, 2))).sample_pair(rng, 100000)
        z1, z2 = ndtri(u1), ndtri(u2)
        r = [np.corrcoef(z1[:, j], z2[:, k])[0, 1] for j in range(2) for k in range(2)]
        assert np.all(np.abs(r) < 4 / np.sqrt(100000))

    def test_orthogonal_is_deterministic(self, rng):
        from scipy.stats import ortho_group
        S = ortho_group.rvs(3, random_state=1)
        c = GaussianCoupling.from_matrix(S)
        z1 = rng.standard_normal((50, 3))
        a = c.transform(z1, rng.standard_normal((50, 3)))
        b = c.transform(z1, rng.standard_normal((50, 3)))
        assert np.allclose(a, b, atol=1e-12)
        assert np.allclose(a, z1 @ S.T, atol=1e-12)

    @pytest.mark.parametrize("v", [-1.2, 0.4, 2.0])
    def test_correlation_1d(self, rng, v):
        c = GaussianCoupling.from_params(GaussianCouplingParams.identity(1, v))
        z1, z2 = c.sample_normal_pair(rng, 100000)
        r = np.corrcoef(z1[:, 0], z2[:, 0])[0, 1]
        sigma = np.tanh(v)
        assert abs(r - sigma) < 4 * (1 - sigma**2) / np.sqrt(100000)

    def test_cross_covariance(self, rng):
        S = np.array([[0.3, -0.4], [0.2, 0.5]])
        z1, z2 = GaussianCoupling.from_matrix(S).sample_normal_pair(rng, 400000)
        # z2 = S z1 + noise, so E[z2 z1^T] = S
        emp = z2.T @ z1 / z1.shape[0]
        assert np.allclose(emp, S, atol=4 / np.sqrt(400000) * 1.5)
        assert np.allclose(np.cov(z2.T), np.eye(2), atol=0.01)

    def test_singular_value_above_one(self):
        with pytest.raises(ValueError, match="positive semidefinite"):
            GaussianCoupling.from_matrix(np.diag([1.2, 0.5]))

    def test_mixture_stratified(self):
        assert stratified_counts([0.3, 0.7], 10).tolist() == [3, 7]
        assert stratified_counts([1 / 3, 1 / 3, 1 / 3], 10).sum() == 10
        with pytest.raises(ValueError):
            MixtureCoupling([0.5, 0.6], [crn(1), antithetic(1)])
        with pytest.raises(ValueError):
            MixtureCoupling([-0.5, 1.5], [crn(1), antithetic(1)])


class TestLogDensity:
    def test_independent_zero(self, rng):
        c = GaussianCoupling.from_matrix(np.zeros((2, 2)))
        u = rng.random((10, 2))
        assert np.allclose(c.log_density(u, rng.random((10, 2))), 0.0, atol=1e-14)

    def test_bivariate_example(self):
        c = GaussianCoupling.from_matrix([[0.5]])
        val = c.log_density([[0.5]], [[0.5]])[0]
        direct = stats.multivariate_normal([0, 0], [[1, 0.5], [0.5, 1]]).logpdf([0, 0]) \
            - 2 * stats.norm.logpdf(0)
        assert val == pytest.approx(direct, rel=1e-12)
        assert val == pytest.approx(0.143841, abs=1e-6)

    def test_matches_bivariate_formula(self, rng):
        S = np.array([[0.3, -0.4], [0.2, 0.5]])
        c = GaussianCoupling.from_matrix(S)
        joint = np.block([[np.eye(2), S.T], [S, np.eye(2)]])
        u1, u2 = rng.random((20, 2)), rng.random((20, 2))
        z = np.hstack([ndtri(u1), ndtri(u2)])
        want = (stats.multivariate_normal(np.zeros(4), joint).logpdf(z)
                - stats.norm.logpdf(z).sum(axis=1))
        assert np.allclose(c.log_density(u1, u2), want, rtol=1e-10)

    def test_normalization(self, rng):
        c = GaussianCoupling.from_matrix([[0.6]])
        n = 10**6
        dens = np.exp(c.log_density(rng.random((n, 1)) * (1 - 2e-12) + 1e-12,
                                    rng.random((n, 1)) * (1 - 2e-12) + 1e-12))
        assert abs(dens.mean() - 1) < 3 * dens.std() / np.sqrt(n)

    def test_singular_errors(self):
        for c in (crn(1), antithetic(1), GaussianCoupling.from_matrix([[1.0]])):
            with pytest.raises(ValueError, match="singular coupling has no density"):
                c.log_density([[0.3]], [[0.3]])

    def test_mixture_density(self, rng):
        a = GaussianCoupling.from_matrix([[0.5]])
        b = IndependentCoupling(1)
        m = MixtureCoupling([0.25, 0.75], [a, b])
        u1, u2 = rng.random((5, 1)), rng.random((5, 1))
        want = np.log(0.25 * np.exp(a.log_density(u1, u2)) + 0.75)
        assert np.allclose(m.log_density(u1, u2), want)


def test_json_roundtrip(rng):
    for c in all_couplings(2, rng):
        back = coupling_from_json(c.to_json())
        z1a, z2a = c.sample_normal_pair(np.random.default_rng(3), 20)
        z1b, z2b = back.sample_normal_pair(np.random.default_rng(3), 20)
        assert np.allclose(z1a, z1b) and np.allclose(z2a, z2b, atol=1e-14), c
        assert back.to_dict() == c.to_dict()


def test_params_vector_roundtrip(rng):
    p = GaussianCouplingParams(np.tril(rng.standard_normal((3, 3)), -1),
                               np.tril(rng.standard_normal((3, 3)), -1), rng.standard_normal(3))
    q = GaussianCouplingParams.from_vector(p.to_vector(), 3)
    assert np.array_equal(p.A_u, q.A_u) and np.array_equal(p.v, q.v)
    with pytest.raises(ValueError):
        GaussianCouplingParams.from_vector(np.zeros(4), 3)


def test_sign_mask():
    c = SignCoupling([1, -1])
    z1, z2 = c.sample_normal_pair(np.random.default_rng(0), 5)
    assert np.array_equal(z2[:, 0], z1[:, 0]) and np.array_equal(z2[:, 1], -z1[:, 1])
    with pytest.raises(ValueError):
        SignCoupling([1, 0])
