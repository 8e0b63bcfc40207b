import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from coupled_is.adaptation import pair_log_weights
from coupled_is.coupling import GaussianCoupling, GaussianCouplingParams
from coupled_is.density import GaussianDist
from coupled_is.variance import haar_orthogonal

_ACCEPTANCE = {}


def record_acceptance(number, title, passed, detail=""):
    _ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[acceptance {number:2d}] {'PASS' if passed else 'FAIL'} {title} {detail}")


@pytest.fixture
def acceptance():
    return record_acceptance


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, lo=0.3, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(lo, hi, d)) @ q.T


def swapped2d():
    """Two-dimensional system with isotropic optima and swapped, widened proposals."""
    q1s = GaussianDist([-0.25, 0.25], 0.25 * np.eye(2))
    q2s = GaussianDist([0.25, -0.25], np.eye(2))
    q1 = GaussianDist([0.25, -0.25], 4 * q1s.cov)
    q2 = GaussianDist([-0.25, 0.25], 4 * q2s.cov)
    return q1, q2, q1s, q2s


def random_config(rng, d):
    """Random Gaussian optima with proposals wider than each optimum."""
    q1s = GaussianDist(rng.standard_normal(d) * 0.5, random_spd(rng, d, 0.3, 1.5))
    q2s = GaussianDist(rng.standard_normal(d) * 0.5, random_spd(rng, d, 0.3, 1.5))
    q1 = GaussianDist(q1s.mean + 0.3 * rng.standard_normal(d), q1s.cov + random_spd(rng, d, 0.2, 1.0))
    q2 = GaussianDist(q2s.mean + 0.3 * rng.standard_normal(d), q2s.cov + random_spd(rng, d, 0.2, 1.0))
    return q1, q2, q1s, q2s


def random_cross(rng, d):
    """Random coupling cross matrix ``U diag(s) V^T`` with Haar rotations and |s| < 1."""
    return (haar_orthogonal(d, rng) * rng.uniform(-1, 1, d)) @ haar_orthogonal(d, rng).T


def random_params(rng, d, scale=0.5):
    A_u = rng.normal(0, scale, (d, d))
    A_v = rng.normal(0, scale, (d, d))
    return GaussianCouplingParams(A_u, A_v, rng.normal(0, 1.0, d))


def _shared_noise(seed, M, d):
    # same draw order as the gradient estimators: z1 first, then w
    r = np.random.default_rng(seed)
    z1 = r.standard_normal((M, d))
    return z1, r.standard_normal((M, d))


def _central(J, theta, h):
    return np.array([(J(theta + h * e) - J(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])


def fd_pathwise(params, jp, problem, M, seed, h=1e-4):
    """Central differences of ``log mean w1 w2`` with ``(z1, w)`` held fixed."""
    d = jp.dim
    z1, w = _shared_noise(seed, M, d)

    def J(theta):
        cpl = GaussianCoupling.from_params(GaussianCouplingParams.from_vector(theta, d))
        lw1, lw2 = pair_log_weights(problem, jp, z1, cpl.transform(z1, w))
        return logsumexp(lw1 + lw2)

    return _central(J, params.to_vector(), h)


def gaussian_copula_logpdf(S, z1, z2):
    """Normal-score copula density of ``(z1, z2)`` with ``Cov(z2, z1) = S``, via scipy."""
    d = S.shape[0]
    joint = np.block([[np.eye(d), S.T], [S, np.eye(d)]])
    both = np.hstack([z1, z2])
    return (multivariate_normal(np.zeros(2 * d), joint).logpdf(both)
            - norm.logpdf(z1).sum(axis=1) - norm.logpdf(z2).sum(axis=1))


def fd_score(params, jp, problem, M, seed, h=1e-4):
    """Central differences of ``log mean[w1 w2 c_theta / c_theta0]`` with pairs held fixed."""
    d = jp.dim
    z1, w = _shared_noise(seed, M, d)
    S0 = GaussianCoupling.from_params(params).S
    z2 = GaussianCoupling.from_params(params).transform(z1, w)
    lw1, lw2 = pair_log_weights(problem, jp, z1, z2)
    base = lw1 + lw2 - gaussian_copula_logpdf(S0, z1, z2)

    def J(theta):
        S = GaussianCoupling.from_params(GaussianCouplingParams.from_vector(theta, d)).S
        return logsumexp(base + gaussian_copula_logpdf(S, z1, z2))

    return _central(J, params.to_vector(), h)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[num]
        terminalreporter.write_line(f"{num:2d}. {'PASS' if passed else 'FAIL'}  {title}  {detail}")
