"""Nuisance estimation: outcome means, conditional variances and the mixture propensity.

Smoothers return immutable :class:`FittedFunction` objects that evaluate on
``(m, d)`` arrays. Cross-fitting builds, for every fold ``k``, functions
trained only on observations outside fold ``k``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial import cKDTree

from batchpool import dgp as dgp_mod
from batchpool.errors import ArmEmptyError, ConfigError
from batchpool.scores import VARIANCE_FLOOR

SMOOTHERS = ("auto", "local-linear", "knn", "ridge-spline")
MIXTURE_MODES = ("known-design", "regression")
MIN_ARM_SIZE = 5


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True)
class FittedFunction:
    """A fitted regression function with optional output bounds."""

    method: str
    predictor: Callable = field(repr=False)
    lower: float = -np.inf
    upper: float = np.inf

    def __call__(self, x) -> np.ndarray:
        out = np.asarray(self.predictor(_points(x)), dtype=float)
        return np.clip(out, self.lower, self.upper)

    def dump_grid(self, path, grid) -> None:
        """Write ``x_1..x_d, value`` rows on a grid for debugging."""
        grid = _points(grid)
        values = self(grid)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(grid.shape[1])] + ["value"])
            for row, val in zip(grid, values):
                writer.writerow([*row.tolist(), float(val)])


def _constant(value: float):
    return lambda pts: np.full(pts.shape[0], value)


def rule_of_thumb_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-coordinate bandwidth ``1.06 * sd * n^(-1/5)``."""
    x = _points(x)
    return 1.06 * x.std(axis=0) * x.shape[0] ** (-0.2)


def _local_linear(x, y, bandwidth=None, chunk: int = 512):
    x = _points(x)
    n, d = x.shape
    h = rule_of_thumb_bandwidth(x) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (d,))
    if np.any(h <= 0):
        return _constant(float(y.mean()))
    xs = x / h
    design_full = np.column_stack([np.ones(n), xs])
    lo, hi = x.min(axis=0), x.max(axis=0)

    def predict(pts):
        # Constant extrapolation outside the training range.
        qs = np.clip(pts, lo, hi) / h
        out = np.empty(qs.shape[0])
        for start in range(0, qs.shape[0], chunk):
            q = qs[start:start + chunk]
            sq = ((q[:, None, :] - xs[None, :, :]) ** 2).sum(axis=2)
            logw = -0.5 * sq
            wts = np.exp(logw - logw.max(axis=1, keepdims=True))
            # Local design centred at the query point.
            gram = np.einsum("qi,ij,ik->qjk", wts, design_full, design_full)
            rhs = wts @ (design_full * y[:, None])
            basis = np.column_stack([np.ones(q.shape[0]), q])
            nw = (wts @ y) / wts.sum(axis=1)
            det_ok = np.linalg.cond(gram) < 1e10
            est = nw.copy()
            if det_ok.any():
                coef = np.linalg.solve(gram[det_ok], rhs[det_ok][:, :, None])[:, :, 0]
                est[det_ok] = np.einsum("qj,qj->q", coef, basis[det_ok])
            out[start:start + chunk] = est
        return out

    return predict


def _knn(x, y, k=None):
    x = _points(x)
    n = x.shape[0]
    k = min(n, int(math.ceil(n ** 0.8)) if k is None else int(k))
    tree = cKDTree(x)

    def predict(pts):
        _, idx = tree.query(pts, k=k)
        idx = np.asarray(idx).reshape(pts.shape[0], -1)
        return y[idx].mean(axis=1)

    return predict


def _bspline_design(x, knots, degree=3):
    return BSpline.design_matrix(x, knots, degree).toarray()


def _ridge_spline(x, y, n_interior: int = 8, lambdas=None):
    """Additive cubic P-spline per coordinate, one penalty chosen by GCV."""
    x = _points(x)
    n, d = x.shape
    lo, hi = x.min(axis=0), x.max(axis=0)
    if np.all(hi - lo <= 0):
        return _constant(float(y.mean()))
    knot_sets, blocks, penalties = [], [np.ones((n, 1))], []
    for j in range(d):
        if hi[j] <= lo[j]:
            knot_sets.append(None)
            continue
        inner = np.unique(np.quantile(x[:, j], np.linspace(0, 1, n_interior + 2)))
        knots = np.concatenate([[inner[0]] * 3, inner, [inner[-1]] * 3])
        knot_sets.append(knots)
        basis = _bspline_design(np.clip(x[:, j], lo[j], hi[j]), knots)
        blocks.append(basis)
        diff2 = np.diff(np.eye(basis.shape[1]), n=2, axis=0)
        penalties.append(diff2.T @ diff2)
    design = np.hstack(blocks)
    p = design.shape[1]
    penalty = np.zeros((p, p))
    pos = 1
    for pen in penalties:
        size = pen.shape[0]
        penalty[pos:pos + size, pos:pos + size] = pen
        pos += size
    penalty += 1e-8 * np.eye(p)
    gram = design.T @ design
    rhs = design.T @ y
    lambdas = np.logspace(-4, 4, 25) if lambdas is None else np.asarray(lambdas, dtype=float)
    best = (np.inf, None)
    for lam in lambdas:
        system = gram + lam * penalty
        coef = np.linalg.solve(system, rhs)
        edf = float(np.trace(np.linalg.solve(system, gram)))
        rss = float(np.sum((y - design @ coef) ** 2))
        gcv = n * rss / max(n - edf, 1.0) ** 2
        if gcv < best[0]:
            best = (gcv, coef)
    coef = best[1]

    def predict(pts):
        cols = [np.ones((pts.shape[0], 1))]
        for j, knots in enumerate(knot_sets):
            if knots is not None:
                cols.append(_bspline_design(np.clip(pts[:, j], lo[j], hi[j]), knots))
        return np.hstack(cols) @ coef

    return predict


def _resolve(method: str, dim: int) -> str:
    if method not in SMOOTHERS:
        raise ConfigError(f"unknown smoother {method!r}; expected one of {SMOOTHERS}")
    if method == "auto":
        return "ridge-spline"
    return method


def smooth(x, y, method: str = "auto", **options) -> FittedFunction:
    """Fit a smoother of ``y`` on ``x``."""
    x = _points(x)
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ConfigError("x and y must have the same number of rows")
    if y.size < MIN_ARM_SIZE:
        raise ArmEmptyError(f"need at least {MIN_ARM_SIZE} observations, got {y.size}")
    method = _resolve(method, x.shape[1])
    if method == "local-linear":
        return FittedFunction(method, _local_linear(x, y, options.get("bandwidth")))
    if method == "knn":
        return FittedFunction(method, _knn(x, y, options.get("k")))
    return FittedFunction(method, _ridge_spline(x, y, options.get("n_interior", 8)))


def fit_mean(x, y, method: str = "auto", **options) -> FittedFunction:
    """Outcome-mean estimate from the observations of one arm.

    Raises
    ------
    ArmEmptyError
        With fewer than five observations.
    """
    return smooth(x, y, method, **options)


def fit_variance(x, y, method: str = "auto", mean_fn=None, floor: float = VARIANCE_FLOOR,
                 **options) -> FittedFunction:
    """Conditional-variance estimate: smooth squared residuals, floor at ``floor``."""
    x = _points(x)
    y = np.asarray(y, dtype=float).ravel()
    if mean_fn is None:
        mean_fn = fit_mean(x, y, method, **options)
    resid_sq = (y - mean_fn(x)) ** 2
    if y.size >= MIN_ARM_SIZE and np.all(resid_sq <= floor):
        return FittedFunction("floor", _constant(floor), lower=floor)
    fitted = smooth(x, resid_sq, method, **options)
    return FittedFunction(fitted.method, fitted.predictor, lower=floor)


@dataclass(frozen=True)
class FoldNuisance:
    """Nuisance functions used to score one fold."""

    m0: Callable
    m1: Callable
    v0: Callable
    v1: Callable
    e: Callable

    def means(self, x):
        return self.m0(x), self.m1(x)

    def variances(self, x):
        return self.v0(x), self.v1(x)


@dataclass(frozen=True)
class NuisanceSet:
    """Per-fold nuisance functions and how they were obtained."""

    folds: tuple
    provenance: str
    method: str = "oracle"

    def __len__(self):
        return len(self.folds)

    def for_fold(self, k: int) -> FoldNuisance:
        return self.folds[k]


def fit_arm_functions(x, z, y, method: str = "auto", floor: float = VARIANCE_FLOOR, **options):
    """Mean and variance estimates for both arms from one data set.

    Returns
    -------
    tuple
        ``(m0, m1, v0, v1)``.
    """
    x = _points(x)
    z = np.asarray(z).ravel()
    y = np.asarray(y, dtype=float).ravel()
    out_m, out_v = [], []
    for arm in (0, 1):
        mask = z == arm
        if mask.sum() < MIN_ARM_SIZE:
            raise ArmEmptyError(f"arm {arm} has {int(mask.sum())} observations")
        m = fit_mean(x[mask], y[mask], method, **options)
        out_m.append(m)
        out_v.append(fit_variance(x[mask], y[mask], method, mean_fn=m, floor=floor, **options))
    return out_m[0], out_m[1], out_v[0], out_v[1]


def design_mixture(propensities, sizes, clip_gamma: float = 0.0) -> FittedFunction:
    """Mixture ``sum_t N_t e_t(x) / sum_t N_t`` of known propensity functions."""
    sizes = np.asarray(sizes, dtype=float)
    props = list(propensities)
    if not props or sizes.size != len(props):
        raise ConfigError("one batch size per propensity is required")
    weights = sizes / sizes.sum()

    def predict(pts):
        return sum(w * np.asarray(e.evaluate(pts), dtype=float) for w, e in zip(weights, props))

    return FittedFunction("known-design", predict, clip_gamma, 1.0 - clip_gamma)


def _average(functions):
    functions = list(functions)
    return lambda pts: sum(np.asarray(f(pts), dtype=float) for f in functions) / len(functions)


def crossfit(record, method: str = "auto", mixture: str = "known-design",
             clip_gamma: float = 0.01, floor: float = VARIANCE_FLOOR, **options) -> NuisanceSet:
    """Out-of-fold nuisance functions for every fold of an experiment record.

    Fold ``k`` functions use only observations whose fold label differs from
    ``k``, pooled across batches. With ``mixture="known-design"`` the mixture
    propensity averages the stored design mixtures of the other folds; with
    ``"regression"`` treatment indicators are smoothed on covariates.

    Raises
    ------
    ConfigError
        With fewer than two folds.
    ArmEmptyError
        If an arm has fewer than five out-of-fold observations.
    """
    if mixture not in MIXTURE_MODES:
        raise ConfigError(f"unknown mixture mode {mixture!r}")
    K = record.n_folds
    if K < 2:
        raise ConfigError("cross-fitting needs at least two folds")
    x, z, y, folds = record.pooled("x"), record.pooled("z"), record.pooled("y"), record.pooled("fold")
    sizes = record.batch_sizes
    fold_mixtures = [design_mixture([record.propensities[t][j] for t in range(record.n_batches)], sizes)
                     for j in range(K)]
    out = []
    for k in range(K):
        mask = folds != k
        try:
            m0, m1, v0, v1 = fit_arm_functions(x[mask], z[mask], y[mask], method, floor, **options)
        except ArmEmptyError as exc:
            raise ArmEmptyError(f"fold {k}: {exc}") from exc
        if mixture == "known-design":
            e_fn = _average(fold_mixtures[j] for j in range(K) if j != k)
        else:
            e_fn = smooth(x[mask], z[mask].astype(float), method, **options)
        e = FittedFunction(mixture, e_fn, clip_gamma, 1.0 - clip_gamma)
        out.append(FoldNuisance(m0, m1, v0, v1, e))
    return NuisanceSet(tuple(out), "estimated", _resolve(method, x.shape[1]))


def oracle(spec, propensities, sizes, n_folds: int = 1, clip_gamma: float = 0.0) -> NuisanceSet:
    """True nuisance functions with the exact design mixture.

    Parameters
    ----------
    spec : DGPSpec
    propensities : list
        Per batch, either one propensity function shared by all folds or a
        list with one function per fold.
    sizes : sequence of int
        Batch sizes ``N_t``.
    n_folds : int
    """
    def arm(fn, z):
        return lambda pts: fn(spec, z, _as_rows(pts, spec.dim))

    means = [arm(dgp_mod.mean_fn, 0), arm(dgp_mod.mean_fn, 1)]
    variances = [arm(dgp_mod.var_fn, 0), arm(dgp_mod.var_fn, 1)]
    out = []
    for k in range(n_folds):
        per_batch = [p[k] if isinstance(p, (list, tuple)) else p for p in propensities]
        e = design_mixture(per_batch, sizes, clip_gamma)
        out.append(FoldNuisance(means[0], means[1], variances[0], variances[1], e))
    return NuisanceSet(tuple(out), "oracle", "oracle")


def _as_rows(pts, dim):
    pts = np.asarray(pts, dtype=float)
    return pts.reshape(-1, dim)
