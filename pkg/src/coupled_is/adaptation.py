"""Two-stage adaptation of a joint proposal.

Stage 1 fits the two marginals (:func:`adapt_marginals`) to the optimal
numerator and denominator proposals by iterated self-normalized moment
matching.  Stage 2 keeps them fixed and tunes a Gaussian coupling to
maximize ``C = E[w1(x1) w2(x2)]`` by stochastic gradient ascent
(:func:`sga_optimize`).

Both gradient estimators target ``grad log C_hat`` where ``C_hat`` is the
batch average of ``w1 w2``.  The pathwise one differentiates through
``z2 = U (sigma * V^T z1 + sech(v) * w)``; since ``z1`` does not depend on
the coupling parameters only the denominator weight contributes.  The score
one weights ``grad log c(u1, u2)`` by the normalized products ``w1 w2``.
Neither needs the unknown constant of ``p~``.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from ._util import check_spd, log_mean_exp, make_rng, spawn_seeds, sym_psd_sqrt
from .coupling import (GaussianCoupling, GaussianCouplingParams, IndependentCoupling, antithetic,
                       crn)
from .density import GaussianDist, LinearEllipticalDist
from .estimators import JointProposal


def pair_log_weights(problem, jp, z1, z2):
    """Log numerator and denominator weights of coupled scores (unscaled)."""
    x1 = jp.t1.from_gaussian(z1)
    x2 = jp.t2.from_gaussian(z2)
    lw1 = problem.log_num(x1) - jp.t1.logpdf(x1)
    lw2 = problem.log_den(x2) - jp.t2.logpdf(x2)
    lw = lw1 + lw2
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        i = int(np.flatnonzero(np.isnan(lw) | (lw == np.inf))[0])
        raise ValueError(f"non-finite joint weight at sample {i}")
    return lw1, lw2


def log_objective(problem, jp, M, rng):
    """``(log C_hat, relative std err)`` without the scale of ``p~``."""
    z1, z2 = jp.sample_scores(make_rng(rng), M)
    lw1, lw2 = pair_log_weights(problem, jp, z1, z2)
    lw = lw1 + lw2
    val = log_mean_exp(lw)
    rel = np.exp(lw - val)
    return float(val), float(rel.std(ddof=1) / np.sqrt(M))


def objective_estimate(jp, problem, M, rng=None):
    """Monte Carlo ``E[w1 w2]`` over ``M`` coupled draws; returns ``(value, std_err)``.

    The weights use ``p~ f`` and ``p~`` directly, so for an unnormalized
    target the value is ``C * I * Z``.  Rescaling ``p~`` by ``c`` multiplies
    it by ``c^2``.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    lv, rel_se = log_objective(problem, jp, M, rng)
    value = float(np.exp(lv + 2.0 * problem.log_scale))
    return value, value * rel_se


def _skew_jacobian(A):
    """Jacobian of ``Q = expm(tril(A) - tril(A)^T)`` w.r.t. the strictly lower entries.

    Row ``i * d + j`` holds ``dQ[i, j] / dA``.  Directional derivatives come
    from the block identity ``expm([[K, E], [0, K]]) = [[Q, L(K, E)], [0, Q]]``
    evaluated for all directions in one batched call.
    """
    d = A.shape[0]
    L = np.tril(A, -1)
    K = L - L.T
    il = np.tril_indices(d, -1)
    k = il[0].size
    if k == 0:
        return np.zeros((d * d, 0))
    blocks = np.zeros((k, 2 * d, 2 * d))
    blocks[:, :d, :d] = K
    blocks[:, d:, d:] = K
    idx = np.arange(k)
    blocks[idx, il[0], d + il[1]] = 1.0
    blocks[idx, il[1], d + il[0]] = -1.0
    dQ = expm(blocks)[:, :d, d:]
    return dQ.reshape(k, d * d).T


@dataclass
class GradientResult:
    """Gradient of ``log C_hat`` w.r.t. the flattened coupling parameters."""

    grad: np.ndarray
    std_err: np.ndarray
    log_objective: float
    obj_std_err: float


def _aggregate(lw, per_sample, log_obj):
    wts = softmax(lw)
    grad = wts @ per_sample
    rel = np.exp(lw - log_obj)
    M = lw.size
    dev = rel[:, None] * (per_sample - grad)
    se = dev.std(axis=0, ddof=1) / np.sqrt(M)
    return grad, se, float(rel.std(ddof=1) / np.sqrt(M))


def _flatten(params, gU, gV, gv):
    """Per-sample gradients on ``U``/``V``/``v`` to flattened parameters."""
    n, d = gv.shape
    JU = _skew_jacobian(params.A_u)
    JV = _skew_jacobian(params.A_v)
    return np.hstack([gU.reshape(n, d * d) @ JU, gV.reshape(n, d * d) @ JV, gv])


def _draw(params, M, rng, d):
    rng = make_rng(rng)
    cpl = GaussianCoupling.from_params(params)
    z1 = rng.standard_normal((M, d))
    w = rng.standard_normal((M, d))
    return cpl, z1, w, cpl.transform(z1, w)


def pathwise_gradient(params, jp, problem, M, rng=None):
    """Reparameterization gradient of ``log C_hat`` (marginals from ``jp``)."""
    if M < 2:
        raise ValueError("M must be at least 2")
    if problem.grad_log_p_tilde is None:
        raise ValueError("problem has no gradient of log p~; use score_gradient instead")
    d = jp.dim
    cpl, z1, w, z2 = _draw(params, M, rng, d)
    lw1, lw2 = pair_log_weights(problem, jp, z1, z2)
    lw = lw1 + lw2
    x2 = jp.t2.from_gaussian(z2)
    gx = problem.grad_log_p_tilde(x2) - jp.t2.grad_logpdf(x2)
    if not np.all(np.isfinite(gx)):
        raise ValueError("non-finite gradient of log weight; use score_gradient instead")
    gz2 = jp.t2.vjp_from_gaussian(z2, gx)
    a = z1 @ cpl.V
    s = cpl.resid
    sig = cpl.sigma
    c = sig * a + s * w
    gU = gz2[:, :, None] * c[:, None, :]
    gc = gz2 @ cpl.U
    gv = gc * (a * s**2 - w * s * sig)
    gV = z1[:, :, None] * (gc * sig)[:, None, :]
    per = _flatten(params, gU, gV, gv)
    log_obj = log_mean_exp(lw)
    grad, se, obj_se = _aggregate(lw, per, log_obj)
    return GradientResult(grad, se, log_obj, obj_se)


def score_gradient(params, jp, problem, M, rng=None):
    """Score-function gradient of ``log C_hat`` (needs no derivatives of ``p~``)."""
    if M < 2:
        raise ValueError("M must be at least 2")
    d = jp.dim
    cpl, z1, _, z2 = _draw(params, M, rng, d)
    if not cpl.has_density:
        raise ValueError("singular coupling has no density; score gradient undefined")
    lw1, lw2 = pair_log_weights(problem, jp, z1, z2)
    lw = lw1 + lw2
    a = z1 @ cpl.V
    b = z2 @ cpl.U
    sig = cpl.sigma
    s2 = cpl.resid**2
    r = b - sig * a
    gv = sig + r * a - r**2 * sig / s2
    gU = z2[:, :, None] * (-r / s2)[:, None, :]
    gV = z1[:, :, None] * (r * sig / s2)[:, None, :]
    per = _flatten(params, gU, gV, gv)
    log_obj = log_mean_exp(lw)
    grad, se, obj_se = _aggregate(lw, per, log_obj)
    return GradientResult(grad, se, log_obj, obj_se)


@dataclass
class AdaptConfig:
    """Settings for coupling optimization.

    ``starts`` are labels ``"I"``, ``"-I"``, ``"0"``; the first two begin
    at ``S = +-tanh(start_v) I``.  ``optimizer`` is ``"amsgrad"`` or ``"sga"``.
    ``eval_batch`` is the sample size used to compare the optimized coupling
    with the CRN / antithetic / independent baselines.
    """

    iterations: int = 500
    batch: int = 256
    lr_start: float = 0.05
    lr_end: float = 0.005
    gradient_kind: str = "pathwise"
    starts: tuple = ("I", "-I", "0")
    seed: int = 0
    optimizer: str = "amsgrad"
    start_v: float = 3.0
    eval_batch: int = 4096
    smooth_window: int = 50
    workers: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.gradient_kind not in ("pathwise", "score"):
            raise ValueError(f"unknown gradient kind {self.gradient_kind!r}")
        if self.optimizer not in ("amsgrad", "sga"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for s in self.starts:
            if s not in ("I", "-I", "0"):
                raise ValueError(f"unknown start {s!r}")

    def learning_rates(self):
        if self.iterations == 1:
            return np.array([self.lr_start])
        return np.linspace(self.lr_start, self.lr_end, self.iterations)


def write_trace_csv(path, objective, std_err, lr):
    """Write an optimization trace as ``iteration,objective,std_err,lr`` rows."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["iteration", "objective", "std_err", "lr"])
        for i, row in enumerate(zip(objective, std_err, lr)):
            out.writerow([i] + [repr(float(x)) for x in row])


@dataclass
class StartTrace:
    label: str
    objective: np.ndarray
    std_err: np.ndarray
    lr: np.ndarray
    params: GaussianCouplingParams
    iterates: list = field(default_factory=list)

    def to_csv(self, path):
        write_trace_csv(path, self.objective, self.std_err, self.lr)

    def smoothed_final(self, window):
        tail = self.objective[-window:]
        return float(tail.mean()) if np.all(np.isfinite(tail)) else -np.inf


@dataclass
class AdaptTrace:
    """Result of :func:`sga_optimize`.

    ``objective`` holds per-iteration ``log C_hat`` of the chosen start.
    ``chosen`` is a start label or, when no optimized coupling beats them,
    the name of the winning baseline.
    """

    objective: np.ndarray
    std_err: np.ndarray
    lr: np.ndarray
    params: Optional[GaussianCouplingParams]
    final_objective: float
    chosen: str
    coupling: object
    starts: dict
    evaluations: dict

    def to_csv(self, path):
        write_trace_csv(path, self.objective, self.std_err, self.lr)


class AdaptationError(RuntimeError):
    def __init__(self, msg, traces):
        super().__init__(msg)
        self.traces = traces


def _start_params(label, d, v0):
    if label == "I":
        return GaussianCouplingParams.identity(d, v0)
    if label == "-I":
        return GaussianCouplingParams.identity(d, -v0)
    return GaussianCouplingParams.identity(d, 0.0)


def _run_start(problem, jp, config, label, seed_seq, keep_iterates=False):
    rng = np.random.default_rng(seed_seq)
    d = jp.dim
    theta = _start_params(label, d, config.start_v).to_vector()
    grad_fn = pathwise_gradient if config.gradient_kind == "pathwise" else score_gradient
    lrs = config.learning_rates()
    T = config.iterations
    obj = np.full(T, np.nan)
    se = np.full(T, np.nan)
    m = np.zeros_like(theta)
    v2 = np.zeros_like(theta)
    vmax = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    iterates = []
    for t in range(T):
        params = GaussianCouplingParams.from_vector(theta, d)
        try:
            g = grad_fn(params, jp, problem, config.batch, rng)
        except ValueError:
            break
        obj[t], se[t] = g.log_objective, g.obj_std_err
        if not np.all(np.isfinite(g.grad)):
            break
        if config.optimizer == "amsgrad":
            m = b1 * m + (1 - b1) * g.grad
            v2 = b2 * v2 + (1 - b2) * g.grad**2
            vmax = np.maximum(vmax, v2)
            theta = theta + lrs[t] * m / (np.sqrt(vmax) + eps)
        else:
            theta = theta + lrs[t] * g.grad
        if keep_iterates:
            iterates.append(theta.copy())
    return StartTrace(label, obj, se, lrs, GaussianCouplingParams.from_vector(theta, d), iterates)


def sga_optimize(problem, marginals, config=None, keep_iterates=False):
    """Multi-start coupling optimization with baseline fallback.

    Parameters
    ----------
    problem : TargetProblem
    marginals : tuple
        ``(q1, q2)`` distributions or transports, fixed during the search.
    config : AdaptConfig, optional
    keep_iterates : bool
        Store every parameter iterate (for reproducibility checks).

    Returns
    -------
    AdaptTrace
    """
    config = config or AdaptConfig()
    q1, q2 = marginals
    d = problem.dim
    jp = JointProposal(q1, q2, IndependentCoupling(d))
    seeds = spawn_seeds(config.seed, len(config.starts) + 1)
    jobs = list(zip(config.starts, seeds))
    workers = min(len(jobs), config.workers or len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            traces = list(ex.map(lambda j: _run_start(problem, jp, config, *j, keep_iterates), jobs))
    else:
        traces = [_run_start(problem, jp, config, *j, keep_iterates) for j in jobs]
    by_label = {tr.label: tr for tr in traces}
    scores = {tr.label: tr.smoothed_final(config.smooth_window) for tr in traces}
    if not any(np.isfinite(s) for s in scores.values()):
        raise AdaptationError("all starts diverged", by_label)
    best = max(scores, key=lambda k: scores[k])
    best_trace = by_label[best]

    candidates = {
        "optimized": GaussianCoupling.from_params(best_trace.params),
        "crn": crn(d),
        "antithetic": antithetic(d),
        "independent": IndependentCoupling(d),
    }
    evaluations = {}
    for name, cpl in candidates.items():
        # same seed for every candidate: common random numbers across the comparison
        rng = np.random.default_rng(seeds[-1])
        evaluations[name] = log_objective(problem, jp.with_coupling(cpl), config.eval_batch, rng)
    base = max(("crn", "antithetic", "independent"), key=lambda k: evaluations[k][0])
    # ties go to the baseline, which needs no parameters
    if evaluations["optimized"][0] > evaluations[base][0]:
        chosen, coupling, params = best, candidates["optimized"], best_trace.params
    else:
        chosen, coupling, params = base, candidates[base], None
    return AdaptTrace(best_trace.objective, best_trace.std_err, best_trace.lr, params,
                      scores[best], chosen, coupling, by_label, evaluations)


# -- Stage 1: marginals -------------------------------------------------------

def _target_fns(problem, which):
    if which == "numerator":
        logt = problem.log_num
        if problem.grad_log_p_tilde is not None and problem.grad_log_f is not None:
            grad = lambda x: problem.grad_log_p_tilde(x) + problem.grad_log_f(x)
        else:
            grad = None
    elif which == "denominator":
        logt = problem.log_den
        grad = problem.grad_log_p_tilde
    else:
        raise ValueError(f"unknown target {which!r}")
    return logt, grad


def laplace_fit(log_target, grad, x0):
    """Mode and inverse negative Hessian of ``log_target``."""
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    fun = lambda x: -float(log_target(x[None, :])[0])
    jac = (lambda x: -grad(x[None, :])[0]) if grad is not None else None
    res = minimize(fun, x0, jac=jac, method="BFGS")
    mode = res.x
    cov = None
    if grad is not None:
        h = 1e-5 * np.maximum(1.0, np.abs(mode))
        H = np.zeros((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h[j]
            H[:, j] = (grad((mode + e)[None, :])[0] - grad((mode - e)[None, :])[0]) / (2 * h[j])
        H = -0.5 * (H + H.T)
        try:
            cov = check_spd(np.linalg.inv(H), "covariance")
        except (ValueError, np.linalg.LinAlgError):
            cov = None
    if cov is None:
        cov = 0.5 * (res.hess_inv + res.hess_inv.T)
    return mode, cov


def _make_family(mean, cov, family, dof):
    if family == "gaussian":
        return GaussianDist(mean, cov)
    if family == "t":
        if dof is None or dof <= 2:
            raise ValueError("t family needs dof > 2 to match a covariance")
        return LinearEllipticalDist(mean, sym_psd_sqrt(cov * (dof - 2.0) / dof), "t", dof)
    raise ValueError(f"unknown family {family!r}")


def fit_marginal(problem, which, family="gaussian", n_adapt=5000, rounds=5, rng=None, dof=None,
                 inflation=1.5, x0=None, return_moments=False):
    """Fit one marginal to ``p~ f`` (``which="numerator"``) or ``p~``.

    Laplace initialization, then ``rounds`` of SNIS moment matching.  The
    returned covariance is the last moment estimate times ``inflation``.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    rng = make_rng(rng)
    d = problem.dim
    logt, grad = _target_fns(problem, which)
    mean, cov = laplace_fit(logt, grad, np.zeros(d) if x0 is None else x0)
    for _ in range(rounds):
        q = _make_family(mean, cov * 2.0 if family == "gaussian" else cov, family, dof)
        x = q.sample(rng, n_adapt)
        lw = logt(x) - q.logpdf(x)
        lw = np.where(np.isnan(lw), -np.inf, lw)
        wn = np.exp(lw - logsumexp(lw))
        ess = 1.0 / np.sum(wn**2)
        if not ess >= 5:
            raise ValueError(f"weight collapse during marginal fit (ESS {ess:.2f} < 5); "
                             "try more rounds, more samples or a heavier-tailed family")
        mean = wn @ x
        diff = x - mean
        cov = (diff * wn[:, None]).T @ diff
        cov = 0.5 * (cov + cov.T)
    out = _make_family(mean, cov * inflation, family, dof)
    if return_moments:
        return out, mean, cov
    return out


def adapt_marginals(problem, family="gaussian", n_adapt=5000, rounds=5, rng=None, dof=None,
                    inflation=1.5):
    """Fit ``(q1, q2)`` to the numerator and denominator targets."""
    rng = make_rng(rng)
    q1 = fit_marginal(problem, "numerator", family, n_adapt, rounds, rng, dof, inflation)
    q2 = fit_marginal(problem, "denominator", family, n_adapt, rounds, rng, dof, inflation)
    return q1, q2
