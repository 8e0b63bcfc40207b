"""Parametric distributions, unnormalized targets and Gaussian algebra.

Everything here works on batches: points are rows of an ``(n, d)`` array and
log-densities come back as length-``n`` vectors.

Sampling in this package is always driven by standard-normal scores ``z``:
a distribution maps ``z`` to a draw with :meth:`from_gaussian`, and the
uniform variable of the quantile construction is ``Phi(z)``.  Sharing ``z``
between two estimators is therefore the same as sharing their uniform stream.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, ndtr, stdtr, stdtrit

from ._util import as_rows, check_spd, make_rng, sym_psd_sqrt

LOG_2PI = np.log(2.0 * np.pi)


class GaussianDist:
    """Multivariate normal with cached Cholesky and symmetric square roots.

    Parameters
    ----------
    mean : array_like, shape (d,)
    cov : array_like, shape (d, d)
        Symmetric positive definite; condition numbers above 1e12 are
        rejected.
    """

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"mean has length {mean.size} but cov has shape {cov.shape}")
        cov = check_spd(cov, "cov")
        self.mean = mean
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self.sym_sqrt = sym_psd_sqrt(cov)
        self._logdet = 2.0 * np.log(np.diag(self.chol)).sum()
        self.precision = np.linalg.inv(cov)
        for arr in (self.mean, self.cov, self.chol, self.sym_sqrt, self.precision):
            arr.setflags(write=False)

    @property
    def dim(self):
        return self.mean.size

    def __repr__(self):
        return f"GaussianDist(mean={self.mean.tolist()}, cov={self.cov.tolist()})"

    def logpdf(self, x):
        x = as_rows(x, self.dim)
        diff = x - self.mean
        sol = solve_triangular(self.chol, diff.T, lower=True, check_finite=False)
        return -0.5 * (self.dim * LOG_2PI + self._logdet + (sol**2).sum(axis=0))

    def grad_logpdf(self, x):
        x = as_rows(x, self.dim)
        return -(x - self.mean) @ self.precision

    def from_gaussian(self, z):
        return self.mean + as_rows(z, self.dim) @ self.sym_sqrt.T

    def sample(self, rng, n):
        rng = make_rng(rng)
        return self.from_gaussian(rng.standard_normal((n, self.dim)))


def _t_logpdf(y, nu):
    return (gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi)
            - 0.5 * (nu + 1) * np.log1p(y * y / nu))


def normal_to_t(z, nu):
    """``F_nu^{-1}(Phi(z))`` evaluated on the tail that keeps precision."""
    z = np.asarray(z, dtype=float)
    neg = np.minimum(z, -z)
    y = stdtrit(nu, ndtr(neg))
    return np.where(z > 0, -y, y)


def t_to_normal(y, nu):
    from scipy.special import ndtri

    y = np.asarray(y, dtype=float)
    neg = np.minimum(y, -y)
    z = ndtri(stdtr(nu, neg))
    return np.where(y > 0, -z, z)


class LinearEllipticalDist:
    """Affine image ``mean + A y`` of iid standard coordinates ``y``.

    With ``base="normal"`` this is a Gaussian with covariance ``A A^T``.  With
    ``base="t"`` each coordinate of ``y`` is a standard Student-t with ``dof``
    degrees of freedom.  That is not the canonical multivariate t (whose
    coordinates share one mixing variable), but it has heavy tails and an
    exact, cheap density.
    """

    def __init__(self, mean, scale, base="normal", dof=None):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        scale = np.atleast_2d(np.asarray(scale, dtype=float))
        if scale.shape != (mean.size, mean.size):
            raise ValueError(f"mean has length {mean.size} but scale has shape {scale.shape}")
        if base not in ("normal", "t"):
            raise ValueError(f"unknown base family {base!r}")
        if base == "t":
            if dof is None or not dof > 0:
                raise ValueError("Student-t base needs a positive dof")
            dof = float(dof)
        sign, logdet = np.linalg.slogdet(scale)
        if sign == 0 or not np.isfinite(logdet):
            raise ValueError("scale matrix is singular")
        sv = np.linalg.svd(scale, compute_uv=False)
        if sv[0] / sv[-1] > 1e12:
            raise ValueError("scale matrix is degenerate")
        self.mean = mean
        self.scale = scale
        self.base = base
        self.dof = dof
        self._inv = np.linalg.inv(scale)
        self._logabsdet = logdet

    @property
    def dim(self):
        return self.mean.size

    @property
    def cov(self):
        c = self.scale @ self.scale.T
        if self.base == "t":
            if self.dof <= 2:
                return np.full_like(c, np.inf)
            c = c * self.dof / (self.dof - 2.0)
        return c

    def __repr__(self):
        extra = f", dof={self.dof}" if self.base == "t" else ""
        return f"LinearEllipticalDist(dim={self.dim}, base={self.base!r}{extra})"

    def base_logpdf(self, y):
        if self.base == "normal":
            return -0.5 * (LOG_2PI + y * y)
        return _t_logpdf(y, self.dof)

    def base_dlogpdf(self, y):
        if self.base == "normal":
            return -y
        return -(self.dof + 1.0) * y / (self.dof + y * y)

    def base_from_normal(self, z):
        if self.base == "normal":
            return np.asarray(z, dtype=float)
        return normal_to_t(z, self.dof)

    def base_to_normal(self, y):
        if self.base == "normal":
            return np.asarray(y, dtype=float)
        return t_to_normal(y, self.dof)

    def base_cdf(self, y):
        return ndtr(y) if self.base == "normal" else stdtr(self.dof, y)

    def base_ppf(self, u):
        from scipy.special import ndtri

        return ndtri(u) if self.base == "normal" else stdtrit(self.dof, u)

    def to_base(self, x):
        return (as_rows(x, self.dim) - self.mean) @ self._inv.T

    def logpdf(self, x):
        y = self.to_base(x)
        return -self._logabsdet + self.base_logpdf(y).sum(axis=1)

    def grad_logpdf(self, x):
        return self.base_dlogpdf(self.to_base(x)) @ self._inv

    def from_gaussian(self, z):
        return self.mean + self.base_from_normal(as_rows(z, self.dim)) @ self.scale.T

    def sample(self, rng, n):
        rng = make_rng(rng)
        return self.from_gaussian(rng.standard_normal((n, self.dim)))


@dataclass(frozen=True)
class TargetProblem:
    """Ratio-of-integrals problem ``mu = int f p~ / int p~``.

    ``log_p_tilde`` and ``log_f`` map an ``(n, d)`` batch to length-``n``
    log values.  ``log_f`` may return ``-inf`` where ``f`` vanishes; negative
    test functions are not supported.

    ``log_scale`` is an extra additive constant of ``log p~``.  It is carried
    separately so that rescaling the target (:meth:`scaled`) is exact; it only
    enters the absolute numerator/denominator values, never the ratio.
    ``log_z`` is the log normalizer of ``p~`` (without ``log_scale``), needed
    only by the unnormalized estimator.
    """

    log_p_tilde: Callable
    log_f: Callable
    dim: int
    grad_log_p_tilde: Optional[Callable] = None
    grad_log_f: Optional[Callable] = None
    log_z: Optional[float] = None
    log_scale: float = 0.0
    name: str = field(default="problem", compare=False)

    @classmethod
    def from_f(cls, log_p_tilde, f, dim, **kwargs):
        """Build a problem from a plain (nonnegative) test function."""

        def log_f(x):
            vals = np.asarray(f(x), dtype=float)
            if np.any(vals < 0):
                raise ValueError(
                    "test function returned negative values; only f >= 0 is supported "
                    "(split f into positive and negative parts and estimate each)")
            with np.errstate(divide="ignore"):
                return np.log(vals)

        return cls(log_p_tilde, log_f, dim, **kwargs)

    @classmethod
    def from_gaussian_pair(cls, q1_star, q2_star, name="gaussian-pair"):
        """Problem whose optimal numerator/denominator proposals are given.

        ``p~ = q2*`` (normalized) and ``f = q1* / q2*`` so that ``p~ f = q1*``,
        ``I = Z = mu = 1``.
        """
        return cls(
            log_p_tilde=q2_star.logpdf,
            log_f=lambda x: q1_star.logpdf(x) - q2_star.logpdf(x),
            dim=q1_star.dim,
            grad_log_p_tilde=q2_star.grad_logpdf,
            grad_log_f=lambda x: q1_star.grad_logpdf(x) - q2_star.grad_logpdf(x),
            log_z=0.0,
            name=name,
        )

    def scaled(self, factor):
        """Same problem with ``p~`` multiplied by ``factor > 0``."""
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        return TargetProblem(self.log_p_tilde, self.log_f, self.dim, self.grad_log_p_tilde,
                             self.grad_log_f, self.log_z, self.log_scale + float(np.log(factor)),
                             self.name)

    def log_num(self, x):
        """Unscaled log of ``p~ f`` (the numerator integrand)."""
        return self.log_p_tilde(x) + self.log_f(x)

    def log_den(self, x):
        return self.log_p_tilde(x)

    def probe(self, x):
        """Check ``log p~`` finite and ``f >= 0`` on probe points."""
        x = as_rows(x, self.dim)
        lp = self.log_p_tilde(x)
        if not np.all(np.isfinite(lp)):
            bad = int(np.flatnonzero(~np.isfinite(lp))[0])
            raise ValueError(f"log p~ is not finite at probe point {x[bad].tolist()}")
        lf = self.log_f(x)
        if np.any(np.isnan(lf)):
            raise ValueError("log f is NaN on probe points")


def _as_gauss_args(m1, S1, m2, S2):
    m1 = np.atleast_1d(np.asarray(m1, dtype=float))
    m2 = np.atleast_1d(np.asarray(m2, dtype=float))
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    if not (m1.size == m2.size == S1.shape[0] == S2.shape[0]):
        raise ValueError("dimension mismatch between Gaussian arguments")
    return m1, check_spd(S1, "S1"), m2, check_spd(S2, "S2")


def gaussian_product(m1, S1, m2, S2):
    """``N(x; m1, S1) N(x; m2, S2) = c N(x; m, S)``; returns ``(c, m, S)``."""
    m1, S1, m2, S2 = _as_gauss_args(m1, S1, m2, S2)
    P1, P2 = np.linalg.inv(S1), np.linalg.inv(S2)
    S = np.linalg.inv(P1 + P2)
    S = 0.5 * (S + S.T)
    m = S @ (P1 @ m1 + P2 @ m2)
    c = np.exp(GaussianDist(m2, S1 + S2).logpdf(m1)[0])
    return c, m, S


def gaussian_ratio(m1, S1, m2, S2):
    """``N(x; m1, S1) / N(x; m2, S2) = scale * N(x; m3, S3)``.

    Requires ``S1^-1 - S2^-1`` positive definite.  ``scale`` is obtained by
    evaluating both sides at ``m3``, which makes the identity exact without a
    closed-form determinant expression.
    """
    m1, S1, m2, S2 = _as_gauss_args(m1, S1, m2, S2)
    P1, P2 = np.linalg.inv(S1), np.linalg.inv(S2)
    Pdiff = P1 - P2
    Pdiff = 0.5 * (Pdiff + Pdiff.T)
    w = np.linalg.eigvalsh(Pdiff)
    if w[0] <= 1e-14 * max(abs(w[-1]), 1.0):
        raise ValueError("precision order violated: S1^-1 - S2^-1 is not positive definite")
    S3 = np.linalg.inv(Pdiff)
    S3 = 0.5 * (S3 + S3.T)
    m3 = S3 @ (P1 @ m1 - P2 @ m2)
    log_scale = (GaussianDist(m1, S1).logpdf(m3)[0] - GaussianDist(m2, S2).logpdf(m3)[0]
                 - GaussianDist(m3, S3).logpdf(m3)[0])
    return np.exp(log_scale), m3, S3


def chi2_gaussians(mA, SA, mB, SB):
    """Pearson chi-squared divergence ``chi2(N(mA, SA) || N(mB, SB))``."""
    mA, SA, mB, SB = _as_gauss_args(mA, SA, mB, SB)
    D = 2.0 * SB - SA
    D = 0.5 * (D + D.T)
    if np.linalg.eigvalsh(D)[0] <= 0:
        raise ValueError("chi-squared divergence infinite: 2*SB - SA is not positive definite")
    _, ldB = np.linalg.slogdet(SB)
    _, ldD = np.linalg.slogdet(D)
    _, ldA = np.linalg.slogdet(SA)
    diff = mA - mB
    quad = diff @ np.linalg.solve(D, diff)
    val = np.expm1(ldB - 0.5 * (ldD + ldA) + quad)
    return max(float(val), 0.0)


def chi2_monte_carlo(p_num_logpdf, q_den_logpdf, sampler_q, n, rng=None):
    """Monte Carlo estimate of ``chi2(p || q) = E_q[(p/q)^2] - 1``.

    ``sampler_q(rng, n)`` must draw from ``q``.  Returns ``(estimate,
    std_err)``.  When ``q`` has lighter tails than ``p`` the estimate is
    finite but its standard error does not settle as ``n`` grows.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    rng = make_rng(rng)
    x = sampler_q(rng, n)
    lw = p_num_logpdf(x) - q_den_logpdf(x)
    w = np.exp(lw)
    bad = ~np.isfinite(w)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite importance weight at sample {i}: {np.asarray(x)[i].tolist()}")
    w2 = w * w
    return float(w2.mean() - 1.0), float(w2.std(ddof=1) / np.sqrt(n))
