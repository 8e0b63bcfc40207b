"""Asymptotic variance of coupled ratio estimators.

The relative asymptotic variance (``lim n Var / mu^2``) of the coupled
estimator splits as::

    chi2(q1* || q1) + chi2(q2* || q2) - 2 (C - 1),    C = E[w1(x1) w2(x2)]

where ``q1* = p~ f / I`` and ``q2* = p~ / Z`` are the optimal numerator and
denominator proposals and ``w_i = q_i* / q_i``.  Only ``C`` depends on the
coupling.  For Gaussian proposals, Gaussian optima and a Gaussian coupling
every term has a closed form.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np
from scipy.stats import ortho_group

from ._util import make_rng, spawn_seeds
from .density import GaussianDist, chi2_gaussians, gaussian_ratio
from .estimators import gensnis_estimate


@dataclass(frozen=True)
class VarianceReport:
    chi2_num: float
    chi2_den: float
    c_term: float

    @property
    def relative_asym_var(self):
        return self.chi2_num + self.chi2_den - 2.0 * (self.c_term - 1.0)

    def lower_bound(self):
        return lower_bound(self.chi2_num, self.chi2_den)


@dataclass(frozen=True)
class DeltaMethodReport:
    bias: float
    variance: float

    @property
    def mse(self):
        return self.bias**2 + self.variance


def _same_gaussian(a, b):
    return (np.allclose(a.mean, b.mean, rtol=1e-13, atol=1e-15)
            and np.allclose(a.cov, b.cov, rtol=1e-13, atol=1e-15))


def c_term_closed_form(q1, q2, q1s, q2s, S_c, roots=None):
    """Closed-form ``C = E[w1(x1) w2(x2)]`` under a Gaussian coupling.

    Parameters
    ----------
    q1, q2 : GaussianDist
        Proposals for numerator and denominator.
    q1s, q2s : GaussianDist
        Optimal numerator and denominator proposals.
    S_c : array_like, shape (d, d)
        Coupling cross matrix, ``z2 = S_c z1 + M w``.
    roots : tuple of arrays, optional
        Square roots ``(L1, L2)`` used by the transports, ``x_i = m_i + L_i z_i``.
        Defaults to the symmetric roots.

    Notes
    -----
    With ``w_i = s_i N(x_i; r_i, R_i)`` (ratio of Gaussians) and the joint law
    of ``(x1, x2)`` Gaussian with cross-covariance ``L1 S_c^T L2^T``,
    ``C = s_1 s_2 N(r; m_joint, R + Sigma_joint)``.
    """
    S_c = np.atleast_2d(np.asarray(S_c, dtype=float))
    if _same_gaussian(q1, q1s) or _same_gaussian(q2, q2s):
        # one weight is identically one, the other has mean one
        return 1.0
    L1, L2 = roots if roots is not None else (q1.sym_sqrt, q2.sym_sqrt)
    parts = []
    for label, q, qs in (("numerator", q1, q1s), ("denominator", q2, q2s)):
        try:
            parts.append(gaussian_ratio(qs.mean, qs.cov, q.mean, q.cov))
        except ValueError as err:
            raise ValueError(f"C term infinite: {label} weight ratio diverges ({err})") from None
    (s1, r1, R1), (s2, r2, R2) = parts
    d = q1.dim
    cross = L1 @ S_c.T @ L2.T
    joint = np.block([[q1.cov, cross], [cross.T, q2.cov]])
    big_R = np.zeros((2 * d, 2 * d))
    big_R[:d, :d] = R1
    big_R[d:, d:] = R2
    m_joint = np.concatenate([q1.mean, q2.mean])
    cov = big_R + joint
    cov = 0.5 * (cov + cov.T)
    r = np.concatenate([r1, r2])
    c3 = GaussianDist(m_joint, cov).logpdf(r)[0]
    return float(s1 * s2 * np.exp(c3))


def _chi2_or_inf(qs, q):
    try:
        return chi2_gaussians(qs.mean, qs.cov, q.mean, q.cov)
    except ValueError:
        return float("inf")


def variance_report_closed_form(q1, q2, q1s, q2s, S_c, roots=None):
    """Three-term report for a Gaussian system.

    Divergent chi-squared terms come back as ``inf`` so sweeps can keep
    going; an infinite ``C`` still raises.
    """
    chi2_num = _chi2_or_inf(q1s, q1)
    chi2_den = _chi2_or_inf(q2s, q2)
    c = c_term_closed_form(q1, q2, q1s, q2s, S_c, roots=roots)
    return VarianceReport(chi2_num, chi2_den, c)


def lower_bound(chi2_num, chi2_den):
    """Smallest relative asymptotic variance reachable by any coupling."""
    if chi2_num < 0 or chi2_den < 0:
        raise ValueError("chi-squared divergences must be nonnegative")
    return (np.sqrt(chi2_den) - np.sqrt(chi2_num)) ** 2


def delta_method_mse(I, Z, var_I, var_Z, cov_IZ):
    """Second-order bias and first-order variance of ``I_hat / Z_hat``."""
    if Z <= 0:
        raise ValueError("Z must be positive")
    if var_I < 0 or var_Z < 0:
        raise ValueError("variances must be nonnegative")
    if abs(cov_IZ) > np.sqrt(var_I * var_Z) * (1 + 1e-12) + 1e-300:
        raise ValueError("|cov_IZ| exceeds sqrt(var_I var_Z) (Cauchy-Schwarz)")
    mu = I / Z
    bias = (mu * var_Z - cov_IZ) / Z**2
    variance = var_I / Z**2 + I**2 * var_Z / Z**4 - 2.0 * I * cov_IZ / Z**3
    return DeltaMethodReport(float(bias), float(variance))


def _worker_count(requested=None):
    cap = os.environ.get("COUPLED_IS_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def replicate(fn, seed, replications, workers=None):
    """Run ``fn(rng)`` for each replication with counter-based child seeds.

    Results come back in replication order regardless of worker count.
    """
    seeds = spawn_seeds(seed, replications)
    rngs = [np.random.default_rng(s) for s in seeds]
    nw = _worker_count(workers)
    if nw == 1:
        return [fn(r) for r in rngs]
    with ThreadPoolExecutor(max_workers=nw) as ex:
        return list(ex.map(fn, rngs))


def sample_variance_with_se(values):
    """Unbiased sample variance and its large-sample standard error."""
    v = np.asarray(values, dtype=float)
    R = v.size
    s2 = v.var(ddof=1)
    m4 = ((v - v.mean()) ** 4).mean()
    se = np.sqrt(max(m4 - s2**2 * (R - 3) / (R - 1), 0.0) / R)
    return float(s2), float(se)


def variance_report_empirical(problem, jp, n, replications, seed=0, estimator=gensnis_estimate,
                              workers=None):
    """``n * Var`` of an estimator over independent replications.

    Returns ``(n_var, std_err)``; divide by ``mu^2`` for the relative value.
    """
    if replications < 30:
        raise ValueError("need at least 30 replications")
    ests = np.array(replicate(lambda r: estimator(problem, jp, n, r).estimate,
                              seed, replications, workers))
    if not np.all(np.isfinite(ests)):
        i = int(np.flatnonzero(~np.isfinite(ests))[0])
        raise ValueError(f"replication {i} produced a non-finite estimate")
    s2, se = sample_variance_with_se(ests)
    return n * s2, n * se


def influence_variance(problem, jp, n, rng=None):
    """Asymptotic variance from one large run via the influence function.

    Estimates ``E[(w1 - mu w2)^2] / E[w2]^2`` on ``n`` coupled pairs, the
    limit of ``n Var(mu_hat)`` (absolute, not relative).  The standard error
    is a delta-method one that accounts for the plug-in ``mu_hat`` and
    ``Z_hat``.  Returns ``(avar, std_err)``.
    """
    res = gensnis_estimate(problem, jp, n, make_rng(rng))
    shift = max(res.log_weights_num.max(), res.log_weights_den.max())
    w1 = np.exp(res.log_weights_num - shift)
    w2 = np.exp(res.log_weights_den - shift)
    A, B, C = np.mean(w1 * w1), np.mean(w1 * w2), np.mean(w2 * w2)
    E, D = w1.mean(), w2.mean()
    mu = E / D
    avar = (A - 2 * mu * B + mu * mu * C) / D**2
    lin = (w1 * w1 - 2 * mu * w1 * w2 + mu * mu * w2 * w2) / D**2 \
        + 2 * (mu * C - B) / D**3 * w1 \
        + (2 * mu * (B - mu * C) / D**3 - 2 * avar / D) * w2
    return float(avar), float(lin.std(ddof=1) / np.sqrt(n))


def snis_variance_floor(problem, p_sampler, n, mu, rng=None):
    """Monte Carlo value of ``(E_p |f - mu|)^2``.

    ``p_sampler(rng, n)`` draws from the normalized target; ``mu`` is the
    exact ratio (closed form or a high-precision pre-run).
    """
    if mu is None:
        raise ValueError("the floor needs mu; supply the closed form or a reference estimate")
    x = p_sampler(make_rng(rng), n)
    f = np.exp(problem.log_f(x))
    return float(np.mean(np.abs(f - mu)) ** 2)


class GridProposal1D:
    """1-D proposal with density proportional to ``h`` on a grid.

    The density is piecewise constant between grid nodes (cell value is the
    mean of ``h`` at its two ends) and zero outside the grid, so its CDF is
    piecewise linear and sampling is exact inversion.
    """

    def __init__(self, grid, h_values):
        grid = np.asarray(grid, dtype=float)
        h = np.asarray(h_values, dtype=float)
        if grid.ndim != 1 or grid.size != h.size or grid.size < 2:
            raise ValueError("grid and h_values must be 1-D of equal length >= 2")
        if np.any(np.diff(grid) <= 0) or np.any(h < 0):
            raise ValueError("grid must increase and h must be nonnegative")
        cell = 0.5 * (h[1:] + h[:-1])
        mass = cell * np.diff(grid)
        total = mass.sum()
        self.grid = grid
        self.density = cell / total
        self.cdf_nodes = np.concatenate([[0.0], np.cumsum(mass) / total])
        self.dim = 1
        step = np.diff(grid)
        # equal spacing lets logpdf find cells by arithmetic instead of a search
        self._step = step[0] if np.allclose(step, step[0], rtol=1e-9, atol=0) else None

    @classmethod
    def snis_optimal(cls, p_logpdf, f, mu, lo, hi, size=200001):
        """Grid version of the SNIS-optimal proposal ``p |f - mu|``."""
        grid = np.linspace(lo, hi, size)
        h = (np.exp(np.reshape(p_logpdf(grid[:, None]), -1))
             * np.abs(np.reshape(f(grid), -1) - mu))
        return cls(grid, h)

    def from_gaussian(self, z):
        from scipy.special import ndtr

        u = ndtr(np.asarray(z, dtype=float).reshape(-1))
        return np.interp(u, self.cdf_nodes, self.grid)[:, None]

    def logpdf(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        last = self.density.size - 1
        if self._step is not None:
            pos = np.floor((x - self.grid[0]) / self._step)
            idx = np.clip(np.nan_to_num(pos, nan=0.0), 0, last).astype(np.intp)
        else:
            idx = np.clip(np.searchsorted(self.grid, x, side="right") - 1, 0, last)
        inside = (x >= self.grid[0]) & (x <= self.grid[-1])
        with np.errstate(divide="ignore"):
            return np.where(inside, np.log(self.density[idx]), -np.inf)


def haar_orthogonal(d, rng):
    """Haar-distributed orthogonal ``d x d`` matrix."""
    rng = make_rng(rng)
    if d == 1:
        return np.array([[1.0 if rng.random() < 0.5 else -1.0]])
    return ortho_group.rvs(d, random_state=rng)
