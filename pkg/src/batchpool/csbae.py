"""Split batch adaptive experiments and their pooled, aggregated and binned estimators.

:func:`run_experiment` runs the fold-split batch design: batch one uses a
fixed propensity, and in every later batch each fold solves its own design
problem from that fold's earlier data only. All randomness comes from
purpose-tagged streams, so different designs run on the same
:class:`~batchpool.rng.StreamFactory` see identical covariates, potential
outcomes, uniforms and fold splits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from batchpool import dgp as dgp_mod
from batchpool import nuisance as nuis
from batchpool import optimizer as opt
from batchpool import propensity as prop
from batchpool.errors import ArmEmptyError, BatchpoolError, ConfigError, EstimationError
from batchpool.rng import StreamFactory
from batchpool.scores import VARIANCE_FLOOR, aipw_scores, epl_scores, solve_linear_score

ESTIMANDS = ("ATE", "PL")
DESIGN_TARGETS = ("pooled", "batch")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class BatchData:
    """Observed data of one batch."""

    x: np.ndarray
    folds: np.ndarray
    uniforms: np.ndarray
    z: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass
class ExperimentRecord:
    """Everything observed and decided in one experiment.

    ``propensities[t][k]`` is the function that assigned treatment to fold
    ``k`` of batch ``t``.
    """

    batches: list
    propensities: list
    n_folds: int
    budgets: list
    estimand: str = "ATE"
    dgp: dgp_mod.DGPSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    @property
    def batch_sizes(self) -> list:
        return [b.size for b in self.batches]

    @property
    def dim(self) -> int:
        return self.batches[0].x.shape[1]

    def pooled(self, name: str) -> np.ndarray:
        """Concatenate a field (``x``, ``z``, ``y``, ``fold``, ``uniforms`` or ``batch``) over batches."""
        if name == "batch":
            return np.concatenate([np.full(b.size, t) for t, b in enumerate(self.batches)])
        attr = "folds" if name == "fold" else name
        return np.concatenate([getattr(b, attr) for b in self.batches])

    def assignment_propensity(self) -> np.ndarray:
        """Propensity each unit was actually assigned with."""
        out = []
        for t, b in enumerate(self.batches):
            vals = np.empty(b.size)
            for k in range(self.n_folds):
                mask = b.folds == k
                if mask.any():
                    vals[mask] = self.propensities[t][k].evaluate(b.x[mask])
            out.append(vals)
        return np.concatenate(out)

    def subrecord(self, t: int) -> "ExperimentRecord":
        """Single-batch record for batch ``t``."""
        return ExperimentRecord([self.batches[t]], [self.propensities[t]], self.n_folds,
                                [self.budgets[t]], self.estimand, self.dgp, {})

    def to_dict(self, include_covariates: bool = True) -> dict:
        batches = []
        for b in self.batches:
            entry = {"folds": b.folds.tolist(), "uniforms": b.uniforms.tolist(),
                     "z": b.z.tolist(), "y": b.y.tolist()}
            if include_covariates:
                entry["x"] = b.x.tolist()
            batches.append(entry)
        return {
            "n_folds": self.n_folds,
            "estimand": self.estimand,
            "budgets": [[bd.low, bd.high] for bd in self.budgets],
            "dgp": None if self.dgp is None else self.dgp.to_dict(),
            "propensities": [[e.to_dict() for e in row] for row in self.propensities],
            "batches": batches,
            "meta": self.meta,
        }

    def to_json(self, path=None, include_covariates: bool = True) -> str:
        text = json.dumps(self.to_dict(include_covariates), default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentRecord":
        batches = []
        for entry in data["batches"]:
            if "x" not in entry:
                raise ConfigError("record was saved without covariates and cannot be replayed")
            batches.append(BatchData(
                x=np.asarray(entry["x"], dtype=float), folds=np.asarray(entry["folds"], dtype=int),
                uniforms=np.asarray(entry["uniforms"], dtype=float),
                z=np.asarray(entry["z"], dtype=np.int8), y=np.asarray(entry["y"], dtype=float)))
        props = [[prop.propensity_from_dict(e) for e in row] for row in data["propensities"]]
        spec = None if data.get("dgp") is None else dgp_mod.DGPSpec.from_dict(data["dgp"])
        return cls(batches, props, int(data["n_folds"]),
                   [prop.Budget(lo, hi) for lo, hi in data["budgets"]],
                   data.get("estimand", "ATE"), spec, data.get("meta", {}))

    @classmethod
    def from_json(cls, path) -> "ExperimentRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


# ---------------------------------------------------------------------------
# Folds and provenance
# ---------------------------------------------------------------------------


def make_folds(batch_sizes, K: int, stream: np.random.Generator) -> list:
    """Fold labels per batch: shuffle, then deal round-robin.

    Fold sizes within a batch differ by at most one. ``K = 1`` (no sample
    splitting) is allowed for designs that do not cross-fit.
    """
    if int(K) != K or K < 1:
        raise ConfigError("K must be a positive integer")
    out = []
    for n in batch_sizes:
        if n < K:
            raise ConfigError(f"batch of size {n} cannot be split into {K} folds")
        labels = np.empty(n, dtype=int)
        labels[stream.permutation(n)] = np.arange(n) % K
        out.append(labels)
    return out


def provenance_hash(*arrays, tag: str = "") -> str:
    """SHA-256 over the bytes of the given arrays (shape and dtype included)."""
    h = hashlib.sha256(tag.encode())
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str((arr.shape, arr.dtype.str)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Running an experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration of one adaptive experiment.

    Parameters
    ----------
    spec : DGPSpec
    batch_sizes : tuple of int
    budgets : tuple of Budget
        One per batch; later-batch designs must meet their budget.
    family : Family
        Family for batches ``t >= 2``. ``constant`` with equality budgets
        gives a simple RCT.
    initial : float
        Constant first-batch propensity.
    n_folds : int
    estimand : {"ATE", "PL"}
    psi_kind : {"A-opt", "D-opt"}
    nuisance : {"oracle", "estimated"}
        Source of the variance functions fed to the design problems.
    smoother : str
    target : {"pooled", "batch"}
        ``pooled`` maximizes efficiency of the pooled estimator over batches
        ``1..t``; ``batch`` targets batch ``t`` alone.
    binned_variances : bool
        Feed within-cell sample variances to ``binned`` designs instead of
        smoothed ones (the discretized-covariate design).
    known_future : bool
        Target the final pooled variance over all batches. With two batches
        this coincides with the default; longer horizons are not supported.
    """

    spec: dgp_mod.DGPSpec
    batch_sizes: tuple = (1000, 1000)
    budgets: tuple = (prop.Budget(0.2, 0.2), prop.Budget(0.2, 0.2))
    family: prop.Family = prop.Family("constant")
    initial: float = 0.2
    n_folds: int = 2
    estimand: str = "ATE"
    psi_kind: str = "A-opt"
    nuisance: str = "oracle"
    smoother: str = "auto"
    target: str = "pooled"
    binned_variances: bool = True
    known_future: bool = False
    floor: float = VARIANCE_FLOOR
    tol: float = 1e-8
    max_iter: int = 5000

    def __post_init__(self):
        if len(self.batch_sizes) != len(self.budgets):
            raise ConfigError("one budget per batch is required")
        if self.estimand not in ESTIMANDS:
            raise ConfigError(f"unknown estimand {self.estimand!r}")
        if self.nuisance not in ("oracle", "estimated"):
            raise ConfigError("nuisance must be 'oracle' or 'estimated'")
        if self.target not in DESIGN_TARGETS:
            raise ConfigError(f"unknown design target {self.target!r}")
        if not 0.0 < self.initial < 1.0:
            raise ConfigError("the first-batch propensity must lie strictly inside (0, 1)")
        if self.known_future and len(self.batch_sizes) > 2:
            raise ConfigError("the known-future design target is only available for two batches")


def sample_potential_outcomes(spec, batch_sizes, streams: StreamFactory):
    """Potential-outcome tables and uniforms, one pair per batch."""
    tables = [dgp_mod.sample_batch(spec, n, streams("batch", t)) for t, n in enumerate(batch_sizes)]
    uniforms = [streams("uniforms", t).random(n) for t, n in enumerate(batch_sizes)]
    return tables, uniforms


def _cell_variances(x, z, y, edges, floor):
    """Per-unit arm variances from within-cell sample variances."""
    cells = prop.bin_labels(x, edges)
    n_cells = len(edges) + 1
    out = []
    for arm in (0, 1):
        mask = z == arm
        if mask.sum() < 2:
            raise ArmEmptyError(f"arm {arm} has fewer than two observations")
        overall = float(np.var(y[mask], ddof=1))
        table = np.full(n_cells, overall)
        for c in range(n_cells):
            sel = mask & (cells == c)
            if sel.sum() >= 2:
                table[c] = np.var(y[sel], ddof=1)
        out.append(np.maximum(table, floor))
    return out


def _design_batch(cfg: ExperimentConfig, t, k, points, history, prior_props, sizes):
    """Solve the fold-``k`` design for batch ``t`` and return (function, values, diagnostics)."""
    hx, hz, hy = history
    family = cfg.family
    n_prev = sum(sizes[:t])
    total = n_prev + sizes[t]
    if cfg.target == "pooled":
        prior = sum(sizes[u] * prior_props[u].evaluate(points) for u in range(t)) / total
        weight = sizes[t] / total
    else:
        prior, weight = np.zeros(points.shape[0]), 1.0

    if family.kind == "binned" and family.edges is None:
        family = family.with_edges(prop.quantile_edges(hx, family.bins))
    if family.kind == "binned" and cfg.binned_variances:
        table0, table1 = _cell_variances(hx, hz, hy, family.edges, cfg.floor)
        cells = prop.bin_labels(points, family.edges)
        v0, v1 = table0[cells], table1[cells]
    elif cfg.nuisance == "oracle":
        v0 = dgp_mod.var_fn(cfg.spec, 0, points)
        v1 = dgp_mod.var_fn(cfg.spec, 1, points)
    else:
        _, _, f0, f1 = nuis.fit_arm_functions(hx, hz, hy, cfg.smoother, cfg.floor)
        v0, v1 = f0(points), f1(points)

    problem = opt.DesignProblem(points, v0, v1, family, cfg.budgets[t],
                                objective="AIPW" if cfg.estimand == "ATE" else "EPL",
                                psi_kind=cfg.psi_kind, prior_mix=prior, current_weight=weight,
                                floor=cfg.floor)
    result = opt.maximize_design(problem, tol=cfg.tol, max_iter=cfg.max_iter)
    return result.function, result.values, result.diagnostics


def run_experiment(cfg: ExperimentConfig, streams: StreamFactory) -> ExperimentRecord:
    """Run the fold-split batch adaptive experiment.

    Raises
    ------
    BatchpoolError
        Solver or nuisance failures, annotated with the batch and fold.
    """
    sizes = list(cfg.batch_sizes)
    K = cfg.n_folds
    tables, uniforms = sample_potential_outcomes(cfg.spec, sizes, streams)
    fold_labels = make_folds(sizes, K, streams("folds", K))
    first = prop.ConstantPropensity(cfg.initial, dim=cfg.spec.dim)
    propensities, batches = [], []
    meta = {"provenance": [], "design": [], "config": _config_summary(cfg)}
    for t, (table, u, folds) in enumerate(zip(tables, uniforms, fold_labels)):
        row, hashes, diags = [], [], []
        values = np.empty(table.x.shape[0])
        for k in range(K):
            mask = folds == k
            points = table.x[mask]
            if t == 0:
                fn, vals, diag = first, first.evaluate(points), None
                hist_hash = provenance_hash(tag="initial")
            else:
                hx = np.concatenate([b.x[b.folds == k] for b in batches])
                hz = np.concatenate([b.z[b.folds == k] for b in batches])
                hy = np.concatenate([b.y[b.folds == k] for b in batches])
                hist_hash = provenance_hash(hx, hz, hy, points, tag=f"batch{t}")
                try:
                    fn, vals, diag = _design_batch(cfg, t, k, points, (hx, hz, hy),
                                                   [propensities[s][k] for s in range(t)], sizes)
                except BatchpoolError as exc:
                    exc.args = (f"batch {t + 1}, fold {k + 1}: {exc}",) + exc.args[1:]
                    raise
            assigned = np.asarray(fn.evaluate(points), dtype=float)
            values[mask] = assigned
            row.append(fn)
            hashes.append(provenance_hash(*([assigned] if t else []), tag=hist_hash))
            diags.append(None if diag is None else diag.to_dict())
        z = prop.assign_treatments(values, u)
        y = np.where(z == 1, table.y1, table.y0)
        batches.append(BatchData(table.x, folds, u, z, y))
        propensities.append(row)
        meta["provenance"].append(hashes)
        meta["design"].append(diags)
    return ExperimentRecord(batches, propensities, K, list(cfg.budgets),
                            cfg.estimand, cfg.spec, meta)


def _config_summary(cfg: ExperimentConfig) -> dict:
    return {
        "batch_sizes": list(cfg.batch_sizes),
        "budgets": [[b.low, b.high] for b in cfg.budgets],
        "family": cfg.family.to_dict(),
        "initial": cfg.initial,
        "n_folds": cfg.n_folds,
        "estimand": cfg.estimand,
        "psi_kind": cfg.psi_kind,
        "nuisance": cfg.nuisance,
        "target": cfg.target,
    }


def audit_provenance(record: ExperimentRecord, cfg: ExperimentConfig) -> bool:
    """Recompute each later-batch fold hash from that fold's own earlier data."""
    for t in range(1, record.n_batches):
        for k in range(record.n_folds):
            prev = record.batches[:t]
            hx = np.concatenate([b.x[b.folds == k] for b in prev])
            hz = np.concatenate([b.z[b.folds == k] for b in prev])
            hy = np.concatenate([b.y[b.folds == k] for b in prev])
            b = record.batches[t]
            points = b.x[b.folds == k]
            tag = provenance_hash(hx, hz, hy, points, tag=f"batch{t}")
            assigned = np.asarray(record.propensities[t][k].evaluate(points), dtype=float)
            if provenance_hash(assigned, tag=tag) != record.meta["provenance"][t][k]:
                return False
    return True


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    """Point estimate, sandwich standard errors and diagnostics."""

    theta_hat: np.ndarray
    sandwich_se: np.ndarray
    covariance: np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"theta_hat": self.theta_hat.tolist(), "sandwich_se": self.sandwich_se.tolist(),
                "method": self.method, "diagnostics": self.diagnostics}


def _basis(psi, x):
    if psi is None:
        return dgp_mod.default_basis(x)
    out = np.asarray(psi(x), dtype=float)
    return out[:, None] if out.ndim == 1 else out


def _score_parts(estimand, x, z, y, fold_nuisance, e, clip_gamma, psi, floor):
    m0, m1 = fold_nuisance.m0(x), fold_nuisance.m1(x)
    if estimand == "ATE":
        return aipw_scores(z, y, m0, m1, e, clip_gamma)
    v0, v1 = fold_nuisance.v0(x), fold_nuisance.v1(x)
    return epl_scores(z, y, m0, v0, v1, e, _basis(psi, x), floor)


def _solve_with_sandwich(s_a, s_b, method, extra=None) -> EstimateReport:
    n = s_b.shape[0]
    mean_a = s_a.mean(axis=0)
    theta = solve_linear_score(s_a.sum(axis=0), s_b.sum(axis=0))
    scores = np.einsum("ijk,k->ij", s_a, theta) + s_b
    meat = scores.T @ scores / n
    bread = np.linalg.inv(mean_a)
    cov = bread @ meat @ bread.T / n
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    diag = {"condition_number": float(np.linalg.cond(mean_a)), "n": int(n)}
    diag.update(extra or {})
    return EstimateReport(theta, se, cov, method, diag)


def pooled_estimate(record: ExperimentRecord, estimand: str, nuisances, clip_gamma: float = 0.01,
                    psi=None, floor: float = VARIANCE_FLOOR) -> EstimateReport:
    """Cross-fitted pooled estimator over all batches with sandwich standard errors.

    Fold-``k`` units are scored with the fold-``k`` nuisances (functions fit
    outside fold ``k``, or the oracle), including the mixture propensity.
    """
    estimand = estimand.upper()
    x, z, y, folds = record.pooled("x"), record.pooled("z"), record.pooled("y"), record.pooled("fold")
    s_a, s_b = [], []
    counts = []
    for k in range(record.n_folds):
        mask = folds == k
        fn = nuisances.for_fold(k if len(nuisances) > 1 else 0)
        parts = _score_parts(estimand, x[mask], z[mask], y[mask], fn, fn.e(x[mask]),
                             clip_gamma, psi, floor)
        s_a.append(parts.s_a)
        s_b.append(parts.s_b)
        counts.append(int(mask.sum()))
    return _solve_with_sandwich(np.concatenate(s_a), np.concatenate(s_b), "pooled",
                                {"fold_counts": counts, "nuisance": nuisances.provenance})


def per_batch_nuisances(record: ExperimentRecord, method: str = "auto", clip_gamma: float = 0.01,
                        floor: float = VARIANCE_FLOOR) -> list:
    """Cross-fitted nuisances using each batch's data alone."""
    return [nuis.crossfit(record.subrecord(t), method, "known-design", clip_gamma, floor)
            for t in range(record.n_batches)]


def aggregated_estimate(record: ExperimentRecord, estimand: str, nuisances, clip_gamma: float = 0.01,
                        psi=None, floor: float = VARIANCE_FLOOR, ridge: float = 1e-8) -> EstimateReport:
    """Inverse-covariance-weighted combination of per-batch estimates.

    Each batch is scored with its own assignment propensity. ``nuisances`` is
    either one :class:`NuisanceSet` shared by all batches (oracle use) or a
    list with one set per batch.
    """
    estimand = estimand.upper()
    per_batch = nuisances if isinstance(nuisances, (list, tuple)) else [nuisances] * record.n_batches
    total = sum(record.batch_sizes)
    precision_sum, weighted_sum = 0.0, 0.0
    estimates, ridge_used = [], False
    for t, b in enumerate(record.batches):
        s_a, s_b = [], []
        for k in range(record.n_folds):
            mask = b.folds == k
            nset = per_batch[t]
            fn = nset.for_fold(k if len(nset) > 1 else 0)
            e = record.propensities[t][k].evaluate(b.x[mask])
            parts = _score_parts(estimand, b.x[mask], b.z[mask], b.y[mask], fn, e, clip_gamma, psi, floor)
            s_a.append(parts.s_a)
            s_b.append(parts.s_b)
        rep = _solve_with_sandwich(np.concatenate(s_a), np.concatenate(s_b), "batch")
        V = rep.covariance * b.size
        try:
            if np.linalg.cond(V) > 1e12:
                raise np.linalg.LinAlgError
            inv = np.linalg.inv(V)
        except np.linalg.LinAlgError:
            inv = np.linalg.inv(V + ridge * np.eye(V.shape[0]))
            ridge_used = True
        kappa = b.size / total
        precision_sum = precision_sum + kappa * inv
        weighted_sum = weighted_sum + kappa * inv @ rep.theta_hat
        estimates.append(rep.theta_hat.tolist())
    cov = np.linalg.inv(precision_sum) / total
    theta = np.linalg.solve(precision_sum, weighted_sum)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return EstimateReport(theta, se, cov, "linear-aggregate",
                          {"batch_estimates": estimates, "ridge_used": ridge_used})


def binned_estimate(record: ExperimentRecord, bins: int = 4, clip_gamma: float = 0.01) -> EstimateReport:
    """AIPW on the quartile-style discretization of ``1'x`` without cross-fitting.

    Cells come from quantiles of the pooled covariate index. Outcome models
    are arm-by-cell sample means; the propensity of a cell is the average
    known-design mixture propensity of its units.
    """
    if bins < 1:
        raise ConfigError("bins must be at least 1")
    x, z, y = record.pooled("x"), record.pooled("z"), record.pooled("y")
    edges = prop.quantile_edges(x, bins) if bins > 1 else np.array([])
    cells = prop.bin_labels(x, edges)
    e_unit = _design_mixture_units(record)
    n_cells = len(edges) + 1
    m = np.zeros((2, n_cells))
    e_cell = np.zeros(n_cells)
    fallbacks = 0
    arm_means = [y[z == arm].mean() if np.any(z == arm) else np.nan for arm in (0, 1)]
    if np.isnan(arm_means).any():
        raise EstimationError("an arm has no observations", condition_number=np.inf)
    for c in range(n_cells):
        in_cell = cells == c
        e_cell[c] = e_unit[in_cell].mean() if in_cell.any() else 0.5
        for arm in (0, 1):
            sel = in_cell & (z == arm)
            if sel.any():
                m[arm, c] = y[sel].mean()
            else:
                m[arm, c] = arm_means[arm]
                fallbacks += 1
    parts = aipw_scores(z, y, m[0, cells], m[1, cells], e_cell[cells], clip_gamma)
    return _solve_with_sandwich(parts.s_a, parts.s_b, "binned-pooled",
                                {"bins": int(n_cells), "empty_cell_fallbacks": fallbacks})


def _design_mixture_units(record: ExperimentRecord) -> np.ndarray:
    """Known-design mixture propensity at every unit, using the unit's fold design."""
    x, folds = record.pooled("x"), record.pooled("fold")
    sizes = np.asarray(record.batch_sizes, dtype=float)
    weights = sizes / sizes.sum()
    out = np.zeros(x.shape[0])
    for k in range(record.n_folds):
        mask = folds == k
        out[mask] = sum(w * record.propensities[t][k].evaluate(x[mask])
                        for t, w in enumerate(weights))
    return out
