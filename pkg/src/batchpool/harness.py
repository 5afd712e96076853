"""Monte Carlo comparison of designs and estimators.

Each replication draws one set of covariates, potential outcomes, uniforms
and fold labels, then runs every requested design on it. Methods are named
``design/estimator``; relative efficiency is the baseline MSE divided by the
method MSE, with a paired bootstrap interval.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from batchpool import __version__
from batchpool import csbae
from batchpool import dgp as dgp_mod
from batchpool import nuisance as nuis
from batchpool import propensity as prop
from batchpool import variance as var
from batchpool.config import SimConfig
from batchpool.errors import BatchpoolError, ConfigError, NumericalError
from batchpool.rng import StreamFactory, make_stream

DESIGN_LABELS = {
    "rct": "Simple RCT",
    "flexible": "Flexible",
    "flexible-batch": "Flexible (batch target)",
    "binned": "Binned",
    "binned-k1": "Binned (single fold)",
}
ESTIMATOR_LABELS = {"pooled": "Pooled", "aggregated": "Linear aggregate", "binned": "Binned"}
REPORT_COLUMNS = ("method", "design", "estimator", "mse", "rel_eff", "ci_lo", "ci_hi",
                  "asymp_rel_eff", "coverage", "n_fail")


def split_method(method: str) -> tuple[str, str]:
    design, _, estimator = method.partition("/")
    return design, estimator


def experiment_config(cfg: SimConfig, design: str) -> csbae.ExperimentConfig:
    """Translate a design name into an experiment configuration."""
    budgets = cfg.budget_objects()
    common = dict(spec=cfg.spec(), batch_sizes=tuple(cfg.batch_sizes), initial=cfg.initial,
                  estimand=cfg.estimand, psi_kind=cfg.psi_kind, nuisance=cfg.nuisance,
                  smoother=cfg.smoother, n_folds=cfg.n_folds,
                  known_future=cfg.known_future)
    if design == "rct":
        exact = tuple(prop.Budget.exact(b.midpoint) for b in budgets)
        return csbae.ExperimentConfig(budgets=exact, family=prop.Family("constant"), **common)
    common["budgets"] = tuple(budgets)
    if design in ("flexible", "flexible-batch"):
        target = "pooled" if design == "flexible" else "batch"
        return csbae.ExperimentConfig(family=cfg.flexible_family(), target=target, **common)
    if design in ("binned", "binned-k1"):
        family = prop.Family("binned", bins=cfg.bins, clip_gamma=cfg.gamma)
        if design == "binned-k1":
            common["n_folds"] = 1
        return csbae.ExperimentConfig(family=family, **common)
    raise ConfigError(f"unknown design {design!r}")


def estimate(record: csbae.ExperimentRecord, estimator: str, cfg: SimConfig) -> csbae.EstimateReport:
    """Apply one estimator to a finished experiment."""
    gamma = cfg.gamma
    if estimator == "binned":
        return csbae.binned_estimate(record, bins=cfg.bins, clip_gamma=gamma)
    if cfg.nuisance == "oracle":
        nuisances = nuis.oracle(record.dgp, record.propensities, record.batch_sizes,
                                record.n_folds, gamma)
    elif estimator == "pooled":
        nuisances = nuis.crossfit(record, cfg.smoother, "known-design", gamma)
    else:
        nuisances = csbae.per_batch_nuisances(record, cfg.smoother, gamma)
    if estimator == "pooled":
        return csbae.pooled_estimate(record, cfg.estimand, nuisances, gamma)
    if estimator == "aggregated":
        return csbae.aggregated_estimate(record, cfg.estimand, nuisances, gamma)
    raise ConfigError(f"unknown estimator {estimator!r}")


@dataclass
class ReplicationResult:
    """Per-method estimates of one replication plus the learned designs."""

    replication: int
    estimates: dict
    errors: dict
    designs: dict


def run_replication(cfg: SimConfig, replication: int) -> ReplicationResult:
    """Run every method on one replication's shared draws."""
    streams = StreamFactory(cfg.master_seed, replication)
    records, design_errors, designs = {}, {}, {}
    methods = cfg.method_list
    for design in dict.fromkeys(split_method(m)[0] for m in methods):
        try:
            record = csbae.run_experiment(experiment_config(cfg, design), streams)
        except BatchpoolError as exc:
            design_errors[design] = f"{type(exc).__name__}: {exc}"
            continue
        records[design] = record
        designs[design] = [[fn.to_dict() for fn in row] for row in record.propensities]
    estimates, errors = {}, {}
    for method in methods:
        design, estimator = split_method(method)
        if design in design_errors:
            errors[method] = design_errors[design]
            continue
        try:
            rep = estimate(records[design], estimator, cfg)
        except BatchpoolError as exc:
            errors[method] = f"{type(exc).__name__}: {exc}"
            continue
        estimates[method] = (rep.theta_hat.copy(), rep.sandwich_se.copy())
    return ReplicationResult(replication, estimates, errors, designs)


def _replication_task(args):
    data, r = args
    return run_replication(SimConfig.model_validate(data), r)


# ---------------------------------------------------------------------------
# Bootstrap and asymptotics
# ---------------------------------------------------------------------------


def bootstrap_ci(losses: dict, baseline: str, B: int = 2000, level: float = 0.90,
                 rng: np.random.Generator | None = None) -> dict:
    """Paired percentile bootstrap for MSE ratios against a baseline.

    Parameters
    ----------
    losses : dict
        Method name to an array of per-replication squared errors, all over
        the same replications.
    baseline : str
    B : int
        Bootstrap resamples.

    Returns
    -------
    dict
        Method name to ``(ratio, lower, upper)`` with ratio = baseline MSE / method MSE.
    """
    if baseline not in losses:
        raise ConfigError("baseline losses are missing")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = np.asarray(losses[baseline], dtype=float)
    R = base.size
    idx = rng.integers(0, R, size=(B, R))
    alpha = 1.0 - level
    out = {}
    base_boot = base[idx].mean(axis=1)
    for method, values in losses.items():
        values = np.asarray(values, dtype=float)
        if values.size != R:
            raise ConfigError("losses must be paired across methods")
        point = base.mean() / values.mean()
        if method == baseline or np.all(values == values[0]) and np.all(base == base[0]):
            out[method] = (point, point, point)
            continue
        ratios = base_boot / values[idx].mean(axis=1)
        lo, hi = np.quantile(ratios, [alpha / 2, 1 - alpha / 2])
        out[method] = (float(point), float(lo), float(hi))
    return out


def weighted_quantile_edges(values, weights, bins: int) -> np.ndarray:
    """Interior cut points splitting weighted ``values`` into equal-mass cells."""
    order = np.argsort(values)
    cum = np.cumsum(np.asarray(weights, dtype=float)[order])
    cum /= cum[-1]
    probs = np.arange(1, bins) / bins
    return np.asarray(values)[order][np.searchsorted(cum, probs)]


class DesignAverager:
    """Running pointwise average of learned propensity functions on a covariate sample.

    Hull functions are averaged through their weights, which is exact
    whenever the clipping box is inactive and avoids evaluating large bases.
    """

    def __init__(self, sample: var.CovariateSample):
        self.sample = sample
        self.sums: dict = {}
        self.hulls: dict = {}
        self.counts: dict = {}

    def add(self, design: str, batches: list) -> None:
        for t, row in enumerate(batches):
            key = (design, t)
            for data in row:
                fn = prop.propensity_from_dict(data)
                if isinstance(fn, prop.HullPropensity):
                    prev = self.hulls.get(key)
                    self.hulls[key] = (fn, fn.weights.copy() if prev is None else prev[1] + fn.weights)
                else:
                    vals = np.asarray(fn.evaluate(self.sample.points), dtype=float)
                    self.sums[key] = self.sums.get(key, 0.0) + vals
                self.counts[key] = self.counts.get(key, 0) + 1

    def mean(self, design: str, t: int) -> np.ndarray:
        key = (design, t)
        n = self.counts[key]
        total = np.zeros(self.sample.size) + self.sums.get(key, 0.0)
        if key in self.hulls:
            fn, weights = self.hulls[key]
            avg = prop.HullPropensity(fn.family, weights / n, fn.dim, atoms=fn.atoms, degree=fn.degree,
                                      transform=fn.transform, clip_gamma=fn.clip_gamma)
            total = total + n * np.asarray(avg.evaluate(self.sample.points), dtype=float)
        return total / n


def asymptotic_variance(cfg: SimConfig, method: str, per_batch_e: list,
                        sample: var.CovariateSample) -> np.ndarray:
    """Large-sample covariance of ``method`` given per-batch (averaged) propensities."""
    design, estimator = split_method(method)
    spec = cfg.spec()
    kappa = np.asarray(cfg.batch_sizes, dtype=float)
    kappa = kappa / kappa.sum()
    v = (dgp_mod.var_fn(spec, 0, sample.points), dgp_mod.var_fn(spec, 1, sample.points))
    m0 = dgp_mod.mean_fn(spec, 0, sample.points)
    m1 = dgp_mod.mean_fn(spec, 1, sample.points)
    tau = m1 - m0
    dev = (tau - float(sample.weights @ tau)) ** 2
    extras = dev if cfg.estimand == "ATE" else None
    e_mix = sum(k * e for k, e in zip(kappa, per_batch_e))
    if estimator == "pooled":
        return np.atleast_2d(var.per_batch_variance(cfg.estimand, e_mix, v, extras, sample))
    if estimator == "aggregated":
        mats = [var.per_batch_variance(cfg.estimand, e, v, extras, sample) for e in per_batch_e]
        return var.vla(mats, kappa).matrix
    index = sample.points.sum(axis=1)
    edges = weighted_quantile_edges(index, sample.weights, cfg.bins)
    labels = np.searchsorted(edges, index, side="right")
    return np.array([[var.v0_aipw_coarse(e_mix, (m0, m1), v, labels, sample)]])


def _size(V) -> float:
    V = np.atleast_2d(V)
    return float(np.trace(V))


# ---------------------------------------------------------------------------
# Study runner and reports
# ---------------------------------------------------------------------------


@dataclass
class MethodRow:
    method: str
    design: str
    estimator: str
    mse: float
    rel_eff: float
    ci_lo: float
    ci_hi: float
    asymp_rel_eff: float
    coverage: float
    n_fail: int
    mean_estimate: list = field(default_factory=list)


@dataclass
class SimulationTable:
    """Summary rows plus study metadata (config, truth, failures)."""

    rows: list
    metadata: dict

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata}


def run_monte_carlo(cfg: SimConfig, progress=None) -> SimulationTable:
    """Run the full study.

    Raises
    ------
    NumericalError
        When the failure rate of any method exceeds ``cfg.max_failure_rate``.
    """
    methods = cfg.method_list
    R = cfg.replications
    if cfg.workers > 1:
        payload = cfg.model_dump()
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_replication_task, [(payload, r) for r in range(R)], chunksize=1))
    else:
        results = []
        for r in range(R):
            results.append(run_replication(cfg, r))
            if progress is not None:
                progress(r + 1, R)

    failures = {m: [] for m in methods}
    for res in results:
        for m, msg in res.errors.items():
            failures[m].append({"replication": res.replication, "error": msg})
    limit = cfg.max_failure_rate * R
    worst = max(methods, key=lambda m: len(failures[m]))
    if len(failures[worst]) > limit:
        raise NumericalError(f"{worst} failed in {len(failures[worst])} of {R} replications; "
                             f"first error: {failures[worst][0]['error']}")

    spec = cfg.spec()
    theta0 = dgp_mod.true_theta(spec, cfg.estimand)
    ok = [res for res in results if all(m in res.estimates for m in methods)]
    if not ok:
        raise NumericalError("no replication succeeded for every method")
    z = float(ndtri(0.5 + cfg.level / 2))
    losses, coverage, means = {}, {}, {}
    for m in methods:
        est = np.array([res.estimates[m][0] for res in ok])
        se = np.array([res.estimates[m][1] for res in ok])
        losses[m] = np.sum((est - theta0) ** 2, axis=1)
        coverage[m] = float(np.mean(np.abs(est - theta0) <= z * se))
        means[m] = est.mean(axis=0).tolist()
    boot = bootstrap_ci(losses, cfg.baseline, cfg.bootstrap, cfg.level,
                        make_stream(cfg.master_seed, "bootstrap"))

    sample = var.covariate_sample(spec, cfg.variance_sample_size, cfg.variance_seed)
    averager = DesignAverager(sample)
    for res in results:
        for design, batches in res.designs.items():
            averager.add(design, batches)
    asymp = {}
    for m in methods:
        design, _ = split_method(m)
        per_batch = [averager.mean(design, t) for t in range(len(cfg.batch_sizes))]
        try:
            asymp[m] = _size(asymptotic_variance(cfg, m, per_batch, sample))
        except BatchpoolError:
            asymp[m] = math.nan
    rows = []
    for m in methods:
        design, estimator = split_method(m)
        ratio, lo, hi = boot[m]
        rows.append(MethodRow(m, design, estimator, float(losses[m].mean()), ratio, lo, hi,
                              asymp[cfg.baseline] / asymp[m], coverage[m], len(failures[m]), means[m]))
    metadata = {
        "config": cfg.model_dump(mode="json"),
        "theta0": theta0.tolist(),
        "replications_used": len(ok),
        "failures": {m: f for m, f in failures.items() if f},
        "version": __version__,
        "numpy": np.__version__,
    }
    return SimulationTable(rows, metadata)


def _fmt(x, digits=3):
    return "nan" if x is None or not np.isfinite(x) else f"{x:.{digits}f}"


def emit_report(table: SimulationTable, fmt: str = "markdown", path=None) -> str:
    """Render a study table as ``csv``, ``json`` or ``markdown``; write it when ``path`` is given."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in table.rows:
            writer.writerow([r.method, r.design, r.estimator] + [repr(float(getattr(r, c)))
                            for c in REPORT_COLUMNS[3:9]] + [r.n_fail])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(table.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"
    elif fmt == "markdown":
        config = table.metadata.get("config", {})
        level = int(round(100 * config.get("level", 0.9)))
        lines = [
            f"| Estimator | Design | Simulated rel. eff. ({level}% CI) | Asymptotic rel. eff. "
            f"| Coverage | Failures |",
            "|---|---|---|---|---|---|",
        ]
        for r in table.rows:
            lines.append(f"| {ESTIMATOR_LABELS[r.estimator]} | {DESIGN_LABELS[r.design]} | "
                         f"{_fmt(r.rel_eff)} ({_fmt(r.ci_lo)}, {_fmt(r.ci_hi)}) | "
                         f"{_fmt(r.asymp_rel_eff)} | {_fmt(r.coverage, 2)} | {r.n_fail} |")
        dgp = config.get("dgp", {})
        lines.append("")
        lines.append(f"Estimand {config.get('estimand')}, d = {dgp.get('dim')}, "
                     f"{dgp.get('var_kind')} variances, {config.get('nuisance')} nuisances, "
                     f"{table.metadata.get('replications_used')} replications. "
                     f"Baseline: {config.get('baseline')}.")
        text = "\n".join(lines) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
