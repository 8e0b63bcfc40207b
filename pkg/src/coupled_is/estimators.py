"""UIS, SNIS and coupled (GenSNIS) ratio estimators.

All weight arithmetic happens in the log domain.  Every estimator consumes
standard-normal scores drawn from the caller's RNG in the same order, so an
SNIS run and a GenSNIS run with the CRN coupling and equal marginals see the
very same samples for the same seed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._util import log_mean_exp, make_rng
from .coupling import Coupling
from .transport import as_transport


class JointProposal:
    """Two marginal transports tied together by a coupling."""

    def __init__(self, t1, t2, coupling):
        self.t1 = as_transport(t1)
        self.t2 = as_transport(t2)
        if not isinstance(coupling, Coupling):
            raise TypeError("coupling must be a Coupling")
        if not self.t1.dim == self.t2.dim == coupling.d:
            raise ValueError(f"dimension mismatch: t1={self.t1.dim}, t2={self.t2.dim}, "
                             f"coupling={coupling.d}")
        self.coupling = coupling

    @property
    def dim(self):
        return self.t1.dim

    def with_coupling(self, coupling):
        return JointProposal(self.t1, self.t2, coupling)

    def sample_scores(self, rng, n):
        return self.coupling.sample_normal_pair(make_rng(rng), n)

    def sample(self, rng, n):
        z1, z2 = self.sample_scores(rng, n)
        return self.t1.from_gaussian(z1), self.t2.from_gaussian(z2)


@dataclass
class EstimateResult:
    """Outcome of one estimator run.

    ``numerator``/``denominator`` are the (possibly huge) absolute values;
    their logs are kept separately to avoid overflow.  ``std_err`` is the
    delta-method standard error of ``estimate``.
    """

    estimate: float
    numerator: float
    denominator: float
    n: int
    log_numerator: float
    log_denominator: float
    log_weights_num: np.ndarray
    log_weights_den: np.ndarray
    std_err: float = float("nan")


def _check_log_weights(lw, x, label):
    bad = np.isnan(lw) | (lw == np.inf)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite {label} weight at sample {i}: x={np.asarray(x)[i].tolist()}")


def _log_weights(problem, t, x, which, logq=None):
    if logq is None:
        logq = t.logpdf(x)
    if which == "num":
        lw = problem.log_num(x) - logq
    else:
        lw = problem.log_den(x) - logq
    _check_log_weights(lw, x, "numerator" if which == "num" else "denominator")
    return lw


def _ratio_std_err(lw_num, lw_den, log_est):
    # influence terms (w1 - mu w2) / Z_hat, shifted to avoid overflow
    shift = max(lw_num.max(), lw_den.max())
    if not np.isfinite(shift):
        return float("nan")
    w1 = np.exp(lw_num - shift)
    w2 = np.exp(lw_den - shift)
    psi = (w1 - np.exp(log_est) * w2) / w2.mean()
    if psi.size < 2:
        return float("nan")
    return float(psi.std(ddof=1) / np.sqrt(psi.size))


def _assemble(lw_num, lw_den, n, log_scale):
    if lw_den.max() == -np.inf:
        raise ValueError("all denominator weights are zero; the proposal missed the target")
    log_i = log_mean_exp(lw_num)
    log_zh = log_mean_exp(lw_den)
    log_est = log_i - log_zh
    return EstimateResult(
        estimate=float(np.exp(log_est)),
        numerator=float(np.exp(log_i + log_scale)),
        denominator=float(np.exp(log_zh + log_scale)),
        n=n,
        log_numerator=float(log_i + log_scale),
        log_denominator=float(log_zh + log_scale),
        log_weights_num=lw_num,
        log_weights_den=lw_den,
        std_err=_ratio_std_err(lw_num, lw_den, log_est),
    )


def uis_estimate(problem, q, n, rng=None):
    """Unnormalized IS: ``mean f p / q`` with ``p`` normalized by ``problem.log_z``."""
    if problem.log_z is None:
        raise ValueError("UIS needs the normalizing constant (problem.log_z)")
    if n < 1:
        raise ValueError("n must be at least 1")
    t = as_transport(q)
    rng = make_rng(rng)
    x = t.from_gaussian(rng.standard_normal((n, problem.dim)))
    lw = _log_weights(problem, t, x, "num")
    terms = np.exp(lw - problem.log_z)
    est = float(terms.mean())
    se = float(terms.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return EstimateResult(est, est, 1.0, n, float(np.log(est)), 0.0, lw,
                          np.full(n, -problem.log_z), se)


def snis_estimate(problem, q, n, rng=None):
    """Self-normalized IS with one proposal for numerator and denominator."""
    if n < 1:
        raise ValueError("n must be at least 1")
    t = as_transport(q)
    rng = make_rng(rng)
    x = t.from_gaussian(rng.standard_normal((n, problem.dim)))
    logq = t.logpdf(x)
    lw_num = _log_weights(problem, t, x, "num", logq)
    lw_den = _log_weights(problem, t, x, "den", logq)
    return _assemble(lw_num, lw_den, n, problem.log_scale)


def gensnis_estimate(problem, jp, n, rng=None):
    """Coupled estimator: numerator on ``x1 ~ q1``, denominator on ``x2 ~ q2``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    x1, x2 = jp.sample(make_rng(rng), n)
    lw_num = _log_weights(problem, jp.t1, x1, "num")
    lw_den = _log_weights(problem, jp.t2, x2, "den")
    return _assemble(lw_num, lw_den, n, problem.log_scale)


def gensnis_recycled(problem, jp, n, rng=None):
    """Coupled estimator that reuses both sample streams in both sums.

    Numerator ``sum f p~/q1 (x1) + sum f p~/q2 (x2)``, denominator
    ``sum p~/q2 (x2) + sum p~/q1 (x1)``.  No standard error is reported.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    x1, x2 = jp.sample(make_rng(rng), n)
    lw_num = np.concatenate([_log_weights(problem, jp.t1, x1, "num"),
                             _log_weights(problem, jp.t2, x2, "num")])
    lw_den = np.concatenate([_log_weights(problem, jp.t2, x2, "den"),
                             _log_weights(problem, jp.t1, x1, "den")])
    if lw_den.max() == -np.inf:
        raise ValueError("all denominator weights are zero; the proposal missed the target")
    log_i = logsumexp(lw_num) - np.log(2 * n)
    log_zh = logsumexp(lw_den) - np.log(2 * n)
    return EstimateResult(
        estimate=float(np.exp(log_i - log_zh)),
        numerator=float(np.exp(log_i + problem.log_scale)),
        denominator=float(np.exp(log_zh + problem.log_scale)),
        n=n,
        log_numerator=float(log_i + problem.log_scale),
        log_denominator=float(log_zh + problem.log_scale),
        log_weights_num=lw_num,
        log_weights_den=lw_den,
    )
