"""Reproducible experiment runners behind the ``coupled-is`` command.

Each runner takes an :class:`ExperimentConfig`, writes one CSV report and a
JSON manifest into the output directory and returns the manifest.  All
randomness derives from ``config.seed`` through counter-based child seeds,
so reruns with the same config are byte-identical regardless of the worker
count.
"""

import csv
import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._util import spawn_seeds
from .adaptation import AdaptConfig, adapt_marginals, sga_optimize
from .coupling import IndependentCoupling, crn
from .density import GaussianDist, TargetProblem
from .estimators import JointProposal, gensnis_estimate, snis_estimate, uis_estimate
from .models import (blr_optimal_marginals, blr_predictive_truth, blr_problem, logreg_problem,
                     make_blr_data, make_corrupted_test, make_logreg_data, make_test_labels)
from .variance import haar_orthogonal, replicate, variance_report_closed_form

EXPERIMENTS = ("blr_landscape", "blr_consistency", "logreg_boxplot", "coupling_adapt_trace")


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field and line."""


@dataclass
class ExperimentConfig:
    """Settings shared by all experiments; each runner reads the ones it needs.

    ``system`` picks the problem for ``blr_landscape`` and
    ``coupling_adapt_trace`` (``"swapped2d"``, ``"blr"`` or ``"logreg"``).
    ``adapt`` holds :class:`AdaptConfig` overrides.
    """

    experiment: str
    seed: int = 0
    out: str = "results"
    replications: int = 50
    system: str = "swapped2d"
    dim: int = 10
    n_data: int = 10
    n_test: int = 10
    data_seed: int = 6
    n_adapt: int = 1500
    adapt_rounds: int = 5
    n_eval: int = 200
    n_reference: int = 800000
    sample_sizes: list = field(default_factory=lambda: [100, 1000, 10000])
    grid_size: int = 21
    sigma_max: float = 0.99
    uv_draws: int = 50
    proposal_inflation: float = 4.0
    adapt: dict = field(default_factory=dict)

    def adapt_config(self):
        return AdaptConfig(**{k: tuple(v) if k == "starts" else v for k, v in self.adapt.items()})

    def to_dict(self):
        # the output directory does not affect results, so it stays out of the hash
        out = asdict(self)
        del out["out"]
        return out


_COUNTS = ("replications", "dim", "n_data", "n_test", "n_adapt", "adapt_rounds", "n_eval",
           "n_reference", "grid_size", "uv_draws")


def _line_of(text, key):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _field_error(text, source, key, msg):
    line = _line_of(text, key) if text else None
    where = f"{source}:{line}" if line else source
    return ConfigError(f"{where}: field '{key}': {msg}")


def parse_config(text, source="<config>", overrides=None):
    """Parse and validate a JSON config; errors carry line and field names."""
    try:
        raw = json.loads(text) if text else {}
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}:{err.lineno}:{err.colno}: invalid JSON ({err.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    raw = {**raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    known = {f.name: f for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise _field_error(text, source, key, "unknown field")
    if "experiment" not in raw:
        raise ConfigError(f"{source}: field 'experiment': missing (one of {', '.join(EXPERIMENTS)})")
    if raw["experiment"] not in EXPERIMENTS:
        raise _field_error(text, source, "experiment",
                           f"unknown experiment {raw['experiment']!r}")
    for key, val in raw.items():
        default = known[key].default
        kind = type(default) if default is not None and not callable(default) else None
        if key in ("sample_sizes",):
            ok = isinstance(val, list) and all(isinstance(v, int) and v >= 2 for v in val) and val
            if not ok:
                raise _field_error(text, source, key, "expected a non-empty list of integers >= 2")
        elif key == "adapt":
            if not isinstance(val, dict):
                raise _field_error(text, source, key, "expected an object")
        elif kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise _field_error(text, source, key, f"expected a number, got {val!r}")
        elif kind is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise _field_error(text, source, key, f"expected an integer, got {val!r}")
        elif kind is str and not isinstance(val, str):
            raise _field_error(text, source, key, f"expected a string, got {val!r}")
    for key in _COUNTS:
        if key in raw and raw[key] < 1:
            raise _field_error(text, source, key, "must be at least 1")
    if "sigma_max" in raw and not 0 < raw["sigma_max"] < 1:
        raise _field_error(text, source, "sigma_max", "must lie in (0, 1)")
    if raw.get("system", "swapped2d") not in ("swapped2d", "blr", "logreg"):
        raise _field_error(text, source, "system", f"unknown system {raw['system']!r}")
    for key in ("sigma_max", "proposal_inflation"):
        if key in raw:
            raw[key] = float(raw[key])
    cfg = ExperimentConfig(**raw)
    try:
        cfg.adapt_config()
    except (TypeError, ValueError) as err:
        raise _field_error(text, source, "adapt", str(err)) from None
    return cfg


def load_config(path, overrides=None):
    with open(path) as fh:
        return parse_config(fh.read(), str(path), overrides)


def config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_manifest(cfg, files, results):
    from . import __version__

    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "version": __version__,
        "files": {os.path.basename(p): _file_digest(p) for p in files},
        "results": results,
    }
    path = os.path.join(cfg.out, f"{cfg.experiment}.manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# -- problems -----------------------------------------------------------------

def swapped2d_system():
    """2-D Gaussian system with isotropic optima and swapped, widened proposals."""
    q1s = GaussianDist([-0.25, 0.25], 0.25 * np.eye(2))
    q2s = GaussianDist([0.25, -0.25], np.eye(2))
    q1 = GaussianDist(q2s.mean, 4.0 * q1s.cov)
    q2 = GaussianDist(q1s.mean, 4.0 * q2s.cov)
    return q1, q2, q1s, q2s


def blr_system(cfg, rng):
    """BLR model, test point and closed-form optimal marginals."""
    m, _ = make_blr_data(rng, cfg.n_data, cfg.dim)
    x_test = rng.standard_normal(cfg.dim)
    y_test = float(rng.standard_normal())
    q1s, q2s = blr_optimal_marginals(m, x_test, y_test)
    return m, x_test, y_test, q1s, q2s


def logreg_system(cfg):
    """Logistic data, corrupted test points and Stage-1 marginals, all from ``data_seed``."""
    rng = np.random.default_rng(cfg.data_seed)
    m, theta = make_logreg_data(rng, cfg.n_data, cfg.dim)
    X_test = make_corrupted_test(m, rng, cfg.n_test)
    y_test = make_test_labels(X_test, theta, rng)
    prob = logreg_problem(m, X_test, y_test)
    q1, q2 = adapt_marginals(prob, n_adapt=cfg.n_adapt, rounds=cfg.adapt_rounds, rng=rng)
    return prob, q1, q2


def _gaussian_system(cfg, rng):
    if cfg.system == "swapped2d":
        return swapped2d_system()
    if cfg.system == "blr":
        _, _, _, q1s, q2s = blr_system(cfg, rng)
        k = cfg.proposal_inflation
        return GaussianDist(q2s.mean, k * q1s.cov), GaussianDist(q1s.mean, k * q2s.cov), q1s, q2s
    raise ConfigError(f"field 'system': {cfg.system!r} has no closed form")


def reference_truth(problem, jp, n, rng, exact=None, max_rel_err=0.01):
    """High-budget reference for ``mu``.

    Returns ``(mu, std_err, warning)``.  With ``exact`` given (BLR) that value
    comes back with zero error bar.  ``warning`` is set when the delta-method
    error bar exceeds ``max_rel_err`` of the estimate.
    """
    if exact is not None:
        return float(exact), 0.0, False
    res = gensnis_estimate(problem, jp, n, rng)
    warn = bool(res.std_err > max_rel_err * abs(res.estimate))
    if warn:
        warnings.warn(f"reference error bar {res.std_err:.3g} exceeds "
                      f"{max_rel_err:.0%} of the estimate {res.estimate:.6g}")
    return float(res.estimate), float(res.std_err), warn


# -- runners ------------------------------------------------------------------

def run_blr_landscape(cfg):
    """Closed-form variance terms over a grid of singular values.

    Draw ``uv_seed = 0`` uses axis-aligned rotations (``U = V = I``); the
    others use Haar rotations from the config seed.
    """
    seeds = spawn_seeds(cfg.seed, cfg.uv_draws + 1)
    q1, q2, q1s, q2s = _gaussian_system(cfg, np.random.default_rng(seeds[-1]))
    if q1.dim != 2:
        raise ConfigError("field 'dim': the singular-value landscape needs dim = 2")
    grid = np.linspace(-cfg.sigma_max, cfg.sigma_max, cfg.grid_size)
    rows = []
    best = (np.inf, None)
    for k in range(cfg.uv_draws):
        rng = np.random.default_rng(seeds[k])
        U, V = (np.eye(2), np.eye(2)) if k == 0 else (haar_orthogonal(2, rng), haar_orthogonal(2, rng))
        for s1 in grid:
            for s2 in grid:
                rep = variance_report_closed_form(q1, q2, q1s, q2s, (U * [s1, s2]) @ V.T)
                val = rep.relative_asym_var
                rows.append([_fmt(s1), _fmt(s2), k, _fmt(rep.chi2_num), _fmt(rep.chi2_den),
                             _fmt(rep.c_term), _fmt(val)])
                if val < best[0]:
                    best = (val, [float(s1), float(s2), k])
    path = os.path.join(cfg.out, "blr_landscape.csv")
    _write_csv(path, ["sigma1", "sigma2", "uv_seed", "chi2_num", "chi2_den", "c_term",
                      "rel_asym_var"], rows)
    return _write_manifest(cfg, [path], {"min_rel_asym_var": best[0], "argmin": best[1]})


def run_blr_consistency(cfg):
    """UIS, SNIS and coupled estimators against the exact BLR predictive."""
    seeds = spawn_seeds(cfg.seed, len(cfg.sample_sizes) + 1)
    setup = np.random.default_rng(seeds[-1])
    m, x_test, y_test, _, _ = blr_system(cfg, setup)
    prob = blr_problem(m, x_test, y_test)
    mu, _, _ = reference_truth(prob, None, 0, None, exact=blr_predictive_truth(m, x_test, y_test))
    q1, q2 = adapt_marginals(prob, n_adapt=cfg.n_adapt, rounds=cfg.adapt_rounds, rng=setup)
    d = cfg.dim
    methods = {
        "uis_q1": lambda n, r: uis_estimate(prob, q1, n, r),
        "snis_q1": lambda n, r: snis_estimate(prob, q1, n, r),
        "snis_q2": lambda n, r: snis_estimate(prob, q2, n, r),
        "independent": lambda n, r: gensnis_estimate(prob, JointProposal(q1, q2, IndependentCoupling(d)), n, r),
        "crn": lambda n, r: gensnis_estimate(prob, JointProposal(q1, q2, crn(d)), n, r),
    }
    rows = []
    summary = {}
    for seed, n in zip(seeds, cfg.sample_sizes):
        for name, fn in methods.items():
            ests = replicate(lambda r: fn(n, r).estimate, seed, cfg.replications)
            for i, e in enumerate(ests):
                rows.append([name, n, i, _fmt(e), _fmt(mu), _fmt(np.log(e / mu))])
            summary[f"{name}@{n}"] = float(np.sqrt(np.mean((np.array(ests) - mu) ** 2)) / mu)
    path = os.path.join(cfg.out, "blr_consistency.csv")
    _write_csv(path, ["method", "n", "replication", "estimate", "truth", "log_ratio"], rows)
    return _write_manifest(cfg, [path], {"truth": mu, "relative_rmse": summary})


def run_logreg_boxplot(cfg):
    """Per-replication ``log(mu_hat / mu)`` for the four logistic-regression methods."""
    prob, q1, q2 = logreg_system(cfg)
    d = prob.dim
    s_ref, s_eval = spawn_seeds(cfg.seed, 2)
    ind = JointProposal(q1, q2, IndependentCoupling(d))
    mu, mu_se, warn = reference_truth(prob, ind, cfg.n_reference, np.random.default_rng(s_ref))
    acfg = cfg.adapt_config()
    trace = sga_optimize(prob, (q1, q2), acfg)
    opt = ind.with_coupling(trace.coupling)
    n = cfg.n_eval
    methods = {
        "optimized": lambda r: gensnis_estimate(prob, opt, n, r).estimate,
        "independent": lambda r: gensnis_estimate(prob, ind, n, r).estimate,
        "snis_q1": lambda r: snis_estimate(prob, q1, n, r).estimate,
        "snis_q2": lambda r: snis_estimate(prob, q2, n, r).estimate,
    }
    rows = []
    medians = {}
    for name, fn in methods.items():
        ests = np.array(replicate(fn, s_eval, cfg.replications))
        lr = np.log(ests / mu)
        medians[name] = float(np.median(np.abs(lr)))
        rows += [[name, i, _fmt(e), _fmt(mu), _fmt(v)] for i, (e, v) in enumerate(zip(ests, lr))]
    path = os.path.join(cfg.out, "logreg_boxplot.csv")
    _write_csv(path, ["method", "replication", "estimate", "truth", "log_ratio"], rows)
    cpath = os.path.join(cfg.out, "logreg_boxplot.coupling.json")
    with open(cpath, "w") as fh:
        fh.write(trace.coupling.to_json() + "\n")
    results = {"truth": mu, "truth_std_err": mu_se, "truth_warning": warn,
               "chosen_coupling": trace.chosen, "median_abs_log_ratio": medians,
               "adapt": asdict(acfg)}
    return _write_manifest(cfg, [path, cpath], results)


def run_coupling_adapt_trace(cfg):
    """Stage-2 optimization traces, one CSV per start plus the chosen one."""
    acfg = cfg.adapt_config()
    if cfg.system == "logreg":
        prob, q1, q2 = logreg_system(cfg)
    else:
        q1, q2, q1s, q2s = _gaussian_system(cfg, np.random.default_rng(spawn_seeds(cfg.seed, 1)[0]))
        prob = TargetProblem.from_gaussian_pair(q1s, q2s)
    trace = sga_optimize(prob, (q1, q2), acfg)
    files = [os.path.join(cfg.out, "coupling_adapt_trace.csv")]
    trace.to_csv(files[0])
    for label, st in sorted(trace.starts.items()):
        path = os.path.join(cfg.out, f"coupling_adapt_trace.start_{label.replace('-', 'neg')}.csv")
        st.to_csv(path)
        files.append(path)
    cpath = os.path.join(cfg.out, "coupling_adapt_trace.coupling.json")
    with open(cpath, "w") as fh:
        fh.write(trace.coupling.to_json() + "\n")
    files.append(cpath)
    results = {"chosen": trace.chosen, "final_objective": trace.final_objective,
               "evaluations": {k: list(v) for k, v in sorted(trace.evaluations.items())},
               "adapt": asdict(acfg)}
    return _write_manifest(cfg, files, results)


RUNNERS = {
    "blr_landscape": run_blr_landscape,
    "blr_consistency": run_blr_consistency,
    "logreg_boxplot": run_logreg_boxplot,
    "coupling_adapt_trace": run_coupling_adapt_trace,
}


def run(cfg):
    """Run the configured experiment; returns its manifest."""
    os.makedirs(cfg.out, exist_ok=True)
    return RUNNERS[cfg.experiment](cfg)
