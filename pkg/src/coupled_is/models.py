"""Bayesian linear and logistic regression test problems.

Both expose the posterior predictive ``mu = int f(theta) p(theta | data)``
as a :class:`TargetProblem` with ``p~`` the unnormalized posterior and ``f``
the likelihood of held-out points.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from ._util import as_rows, make_rng
from .density import LOG_2PI, GaussianDist, LinearEllipticalDist, TargetProblem


@dataclass(frozen=True)
class BlrModel:
    """Linear-Gaussian regression ``y ~ N(X theta, sigma2 I)``, ``theta ~ prior``."""

    X: np.ndarray
    y: np.ndarray
    sigma2: float
    prior: GaussianDist

    @property
    def dim(self):
        return self.prior.dim

    def with_data(self, X_new, y_new):
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        return BlrModel(np.vstack([self.X, X_new]),
                        np.concatenate([self.y, np.atleast_1d(np.asarray(y_new, dtype=float))]),
                        self.sigma2, self.prior)

    def log_likelihood(self, theta, X=None, y=None):
        X = self.X if X is None else np.atleast_2d(X)
        y = self.y if y is None else np.atleast_1d(y)
        resid = y[None, :] - as_rows(theta, self.dim) @ X.T
        return -0.5 * (y.size * (LOG_2PI + np.log(self.sigma2)) + (resid**2).sum(axis=1) / self.sigma2)

    def grad_log_likelihood(self, theta, X=None, y=None):
        X = self.X if X is None else np.atleast_2d(X)
        y = self.y if y is None else np.atleast_1d(y)
        resid = y[None, :] - as_rows(theta, self.dim) @ X.T
        return resid @ X / self.sigma2


def make_blr(X, y, sigma2=1.0, prior_mean=None, prior_cov=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    D = X.shape[1]
    prior = GaussianDist(np.zeros(D) if prior_mean is None else prior_mean,
                         np.eye(D) if prior_cov is None else prior_cov)
    return BlrModel(X, y, float(sigma2), prior)


def blr_posterior(m):
    """Conjugate Gaussian posterior of a :class:`BlrModel`."""
    P0 = m.prior.precision
    prec = P0 + m.X.T @ m.X / m.sigma2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (P0 @ m.prior.mean + m.X.T @ m.y / m.sigma2)
    return GaussianDist(mean, cov)


def blr_predictive_truth(m, x_test, y_test):
    """Exact ``p(y_test | x_test, data)``; several test rows give the joint density."""
    Xt = np.atleast_2d(np.asarray(x_test, dtype=float))
    yt = np.atleast_1d(np.asarray(y_test, dtype=float))
    post = blr_posterior(m)
    cov = m.sigma2 * np.eye(yt.size) + Xt @ post.cov @ Xt.T
    return float(np.exp(GaussianDist(Xt @ post.mean, cov).logpdf(yt)[0]))


def blr_log_evidence(m):
    cov = m.sigma2 * np.eye(m.y.size) + m.X @ m.prior.cov @ m.X.T
    if m.y.size == 0:
        return 0.0
    return float(GaussianDist(m.X @ m.prior.mean, cov).logpdf(m.y)[0])


def blr_optimal_marginals(m, x_test, y_test):
    """``(q1*, q2*)``: posterior with and without the test observations."""
    return blr_posterior(m.with_data(x_test, y_test)), blr_posterior(m)


def blr_problem(m, x_test, y_test):
    """Posterior predictive of a BLR model as a :class:`TargetProblem`.

    ``log_z`` is the exact log evidence, so UIS is available too.
    """
    Xt = np.atleast_2d(np.asarray(x_test, dtype=float))
    yt = np.atleast_1d(np.asarray(y_test, dtype=float))
    return TargetProblem(
        log_p_tilde=lambda th: m.log_likelihood(th) + m.prior.logpdf(th),
        log_f=lambda th: m.log_likelihood(th, Xt, yt),
        dim=m.dim,
        grad_log_p_tilde=lambda th: m.grad_log_likelihood(th) + m.prior.grad_logpdf(th),
        grad_log_f=lambda th: m.grad_log_likelihood(th, Xt, yt),
        log_z=blr_log_evidence(m),
        name="blr-predictive",
    )


def make_blr_data(rng, n, D, sigma2=1.0, prior_scale=1.0):
    """Random BLR dataset with standard-normal covariates."""
    rng = make_rng(rng)
    X = rng.standard_normal((n, D))
    theta = prior_scale * rng.standard_normal(D)
    y = X @ theta + np.sqrt(sigma2) * rng.standard_normal(n)
    return make_blr(X, y, sigma2, prior_cov=prior_scale**2 * np.eye(D)), theta


@dataclass(frozen=True)
class LogRegModel:
    """Bernoulli-sigmoid regression with a standard normal prior.

    ``X`` carries an intercept column of ones in position 0.
    """

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not np.all(np.isin(self.y, (0, 1))):
            raise ValueError("responses must be 0 or 1")
        if self.X.shape[0] and not np.all(self.X[:, 0] == 1.0):
            raise ValueError("first column of X must be the intercept (all ones)")

    @property
    def dim(self):
        return self.X.shape[1]


def logreg_log_lik(theta, X, y):
    """Per-row sums of ``y log s(x.theta) + (1 - y) log(1 - s(x.theta))``."""
    eta = as_rows(theta, X.shape[1]) @ X.T
    return (y * log_expit(eta) + (1 - y) * log_expit(-eta)).sum(axis=1)


def logreg_grad_log_lik(theta, X, y):
    eta = as_rows(theta, X.shape[1]) @ X.T
    return (y - expit(eta)) @ X


def logreg_log_unnorm_posterior(m, theta):
    theta = as_rows(theta, m.dim)
    prior = -0.5 * (m.dim * LOG_2PI + (theta**2).sum(axis=1))
    return logreg_log_lik(theta, m.X, m.y) + prior


def logreg_grad_log_unnorm_posterior(m, theta):
    theta = as_rows(theta, m.dim)
    return logreg_grad_log_lik(theta, m.X, m.y) - theta


def add_intercept(Z):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


def make_logreg_data(rng, n, D):
    """Covariates iid N(0, 1), labels from a ``theta_true ~ N(0, I)``.

    Returns ``(model, theta_true)``.
    """
    rng = make_rng(rng)
    X = add_intercept(rng.standard_normal((n, D)))
    theta = rng.standard_normal(D + 1)
    y = (rng.random(n) < expit(X @ theta)).astype(float)
    return LogRegModel(X, y), theta


def make_corrupted_test(m, rng, count, dof=3.0, scale2=10.0):
    """Heavy-tailed test covariates around the column means of the data.

    Rows come from an affine Student-t law (``dof`` degrees of freedom,
    scale ``sqrt(scale2) I``) centred at the non-intercept column means of
    ``m.X``; the intercept column is re-attached.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    loc = m.X[:, 1:].mean(axis=0)
    D = loc.size
    dist = LinearEllipticalDist(loc, np.sqrt(scale2) * np.eye(D), "t", dof)
    return add_intercept(dist.sample(make_rng(rng), count))


def make_test_labels(X_test, theta, rng):
    rng = make_rng(rng)
    return (rng.random(X_test.shape[0]) < expit(X_test @ theta)).astype(float)


def logreg_problem(m, X_test, y_test):
    """Posterior predictive ``prod_k g(y_k | x_k, theta)`` as a TargetProblem."""
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    y_test = np.atleast_1d(np.asarray(y_test, dtype=float))
    return TargetProblem(
        log_p_tilde=lambda th: logreg_log_unnorm_posterior(m, th),
        log_f=lambda th: logreg_log_lik(th, X_test, y_test),
        dim=m.dim,
        grad_log_p_tilde=lambda th: logreg_grad_log_unnorm_posterior(m, th),
        grad_log_f=lambda th: logreg_grad_log_lik(th, X_test, y_test),
        name="logreg-predictive",
    )
