"""Synthetic data-generating processes with closed-form nuisance functions.

A process is described by a :class:`DGPSpec`. Potential outcomes are
``Y(z) = m(z, X) + eps(z)`` with ``eps(z) | X ~ Normal(0, v(z, X))`` drawn
independently across the two arms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from batchpool.errors import ConfigError, DimensionMismatchError

COVARIATE_LAWS = ("standard-gaussian", "uniform-unit-interval", "density-2x-on-unit-interval")
MEAN_KINDS = ("linear", "zero")
VAR_KINDS = ("homoskedastic", "heteroskedastic", "custom-table")

# The heteroskedastic variance uses the index clamped to [-8 sqrt(d), 8 sqrt(d)]
# so that variances are bounded above and below on any support.
INDEX_CLAMP = 8.0


@dataclass(frozen=True)
class CustomTable:
    """Piecewise-constant means and variances on cells of the index ``1'x``.

    Parameters
    ----------
    edges : sequence of float
        Increasing interior cut points; ``len(edges) + 1`` cells.
    means : array_like, shape (2, cells)
        ``means[z, c]`` is the arm-``z`` conditional mean on cell ``c``.
    variances : array_like, shape (2, cells)
        Conditional variances, strictly positive.
    """

    edges: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        means = np.asarray(self.means, dtype=float)
        variances = np.asarray(self.variances, dtype=float)
        cells = edges.size + 1
        if edges.ndim != 1 or np.any(np.diff(edges) <= 0):
            raise ConfigError("table edges must be strictly increasing")
        if means.shape != (2, cells) or variances.shape != (2, cells):
            raise ConfigError(f"table means/variances must have shape (2, {cells})")
        if np.any(variances <= 0) or not np.all(np.isfinite(variances)):
            raise ConfigError("table variances must be finite and positive")
        object.__setattr__(self, "edges", tuple(edges.tolist()))
        object.__setattr__(self, "means", tuple(map(tuple, means.tolist())))
        object.__setattr__(self, "variances", tuple(map(tuple, variances.tolist())))

    def cell(self, index: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.edges), index, side="right")


@dataclass(frozen=True)
class DGPSpec:
    """Description of a data-generating process.

    Parameters
    ----------
    dim : int
        Covariate dimension ``d``.
    covariate_law : str
        One of ``standard-gaussian``, ``uniform-unit-interval`` or
        ``density-2x-on-unit-interval`` (coordinates i.i.d.).
    mean_kind : str
        ``linear`` gives ``m(0, x) = 1'x``; ``zero`` gives ``m(0, x) = 0``.
    var_kind : str
        ``homoskedastic`` (unit variances), ``heteroskedastic`` or
        ``custom-table``.
    effect : tuple of float
        Coefficients ``theta`` of the treatment effect ``m(1, x) - m(0, x)
        = (1, x')' theta``. Empty means a zero effect.
    table : CustomTable, optional
        Required for ``custom-table``; then means and variances come from it.
    """

    dim: int = 1
    covariate_law: str = "standard-gaussian"
    mean_kind: str = "linear"
    var_kind: str = "homoskedastic"
    effect: tuple = ()
    table: CustomTable | None = field(default=None)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ConfigError("dim must be a positive integer")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ConfigError(f"unknown covariate law {self.covariate_law!r}")
        if self.mean_kind not in MEAN_KINDS:
            raise ConfigError(f"unknown mean kind {self.mean_kind!r}")
        if self.var_kind not in VAR_KINDS:
            raise ConfigError(f"unknown variance kind {self.var_kind!r}")
        if self.var_kind == "custom-table" and self.table is None:
            raise ConfigError("custom-table processes need a table")
        effect = tuple(float(c) for c in self.effect)
        if effect and len(effect) != self.dim + 1:
            raise ConfigError(f"effect must have length dim + 1 = {self.dim + 1}")
        object.__setattr__(self, "effect", effect)

    @property
    def effect_coefficients(self) -> np.ndarray:
        if self.effect:
            return np.asarray(self.effect, dtype=float)
        return np.zeros(self.dim + 1)

    @property
    def theta0_pl(self) -> np.ndarray:
        return true_theta(self, "PL")

    @property
    def theta0_ate(self) -> float:
        return float(true_theta(self, "ATE")[0])

    def to_dict(self) -> dict:
        out = {
            "dim": self.dim,
            "covariate_law": self.covariate_law,
            "mean_kind": self.mean_kind,
            "var_kind": self.var_kind,
            "effect": list(self.effect),
        }
        if self.table is not None:
            out["table"] = {
                "edges": list(self.table.edges),
                "means": [list(r) for r in self.table.means],
                "variances": [list(r) for r in self.table.variances],
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DGPSpec":
        data = dict(data)
        table = data.pop("table", None)
        if table is not None and not isinstance(table, CustomTable):
            table = CustomTable(**table)
        data["effect"] = tuple(data.get("effect", ()))
        return cls(table=table, **data)


@dataclass
class PotentialTable:
    """Covariates and both potential outcomes for ``n`` units."""

    x: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y0 = np.asarray(self.y0, dtype=float).ravel()
        self.y1 = np.asarray(self.y1, dtype=float).ravel()
        n = self.x.shape[0]
        if self.y0.shape != (n,) or self.y1.shape != (n,):
            raise DimensionMismatchError("x, y0 and y1 must have aligned rows")

    def __len__(self):
        return self.x.shape[0]


def default_basis(x: np.ndarray) -> np.ndarray:
    """Effect basis ``psi(x) = (1, x')'`` evaluated row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([np.ones(x.shape[0]), x])


def _as_points(spec: DGPSpec, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1 and (arr.size == spec.dim and (arr.ndim == 1 or spec.dim == 1))
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if single else arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != spec.dim:
        raise DimensionMismatchError(
            f"expected points with {spec.dim} coordinates, got shape {np.shape(x)}"
        )
    return arr, single


def _index(points: np.ndarray) -> np.ndarray:
    return points.sum(axis=1)


def _mean_values(spec: DGPSpec, z: int, points: np.ndarray) -> np.ndarray:
    if spec.var_kind == "custom-table":
        cells = spec.table.cell(_index(points))
        return np.asarray(spec.table.means)[z, cells]
    base = _index(points) if spec.mean_kind == "linear" else np.zeros(points.shape[0])
    if z == 1:
        base = base + default_basis(points) @ spec.effect_coefficients
    return base


def _var_values(spec: DGPSpec, z: int, points: np.ndarray) -> np.ndarray:
    n = points.shape[0]
    if spec.var_kind == "homoskedastic":
        return np.ones(n)
    if spec.var_kind == "heteroskedastic":
        root_d = math.sqrt(spec.dim)
        s = np.clip(_index(points), -INDEX_CLAMP * root_d, INDEX_CLAMP * root_d)
        base = np.exp(s / (2.0 * root_d))
        return base if z == 0 else 2.0 * base
    cells = spec.table.cell(_index(points))
    return np.asarray(spec.table.variances)[z, cells]


def _check_arm(z):
    if z not in (0, 1):
        raise ConfigError(f"treatment arm must be 0 or 1, got {z!r}")
    return int(z)


def mean_fn(spec: DGPSpec, z: int, x):
    """Conditional mean ``m(z, x)``.

    Parameters
    ----------
    spec : DGPSpec
    z : {0, 1}
    x : array_like
        One point of length ``dim`` or an ``(n, dim)`` array.

    Returns
    -------
    float or numpy.ndarray
        A float for a single point, otherwise an array of length ``n``.
    """
    points, single = _as_points(spec, x)
    out = _mean_values(spec, _check_arm(z), points)
    return float(out[0]) if single else out


def var_fn(spec: DGPSpec, z: int, x):
    """Conditional variance ``v(z, x)``; same calling convention as :func:`mean_fn`."""
    points, single = _as_points(spec, x)
    out = _var_values(spec, _check_arm(z), points)
    return float(out[0]) if single else out


def sample_covariates(spec: DGPSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.covariate_law == "standard-gaussian":
        return rng.standard_normal((n, spec.dim))
    u = rng.random((n, spec.dim))
    if spec.covariate_law == "uniform-unit-interval":
        return u
    return np.sqrt(u)


def sample_batch(spec: DGPSpec, n: int, rng: np.random.Generator) -> PotentialTable:
    """Draw ``n`` i.i.d. units with both potential outcomes.

    Draw order is covariates, then arm-0 noise, then arm-1 noise, so the
    table is a deterministic function of the generator state.
    """
    if int(n) != n or n < 1:
        raise ConfigError("n must be a positive integer")
    x = sample_covariates(spec, int(n), rng)
    eps0 = rng.standard_normal(int(n))
    eps1 = rng.standard_normal(int(n))
    y0 = _mean_values(spec, 0, x) + np.sqrt(_var_values(spec, 0, x)) * eps0
    y1 = _mean_values(spec, 1, x) + np.sqrt(_var_values(spec, 1, x)) * eps1
    return PotentialTable(x=x, y0=y0, y1=y1)


def _covariate_mean(spec: DGPSpec) -> float:
    return {"standard-gaussian": 0.0, "uniform-unit-interval": 0.5,
            "density-2x-on-unit-interval": 2.0 / 3.0}[spec.covariate_law]


def _index_cdf(spec: DGPSpec, s: np.ndarray) -> np.ndarray:
    if spec.covariate_law == "standard-gaussian":
        return ndtr(s / math.sqrt(spec.dim))
    if spec.dim != 1:
        raise ConfigError("custom tables on non-Gaussian laws are supported for dim=1 only")
    s = np.clip(s, 0.0, 1.0)
    return s if spec.covariate_law == "uniform-unit-interval" else s**2


def true_theta(spec: DGPSpec, estimand: str) -> np.ndarray:
    """Estimand truth: length-1 vector for ``ATE``, length ``d+1`` for ``PL``."""
    estimand = estimand.upper()
    if estimand not in ("ATE", "PL"):
        raise ConfigError(f"unknown estimand {estimand!r}")
    if spec.var_kind == "custom-table":
        means = np.asarray(spec.table.means)
        effect = means[1] - means[0]
        if estimand == "PL":
            if not np.allclose(effect, effect[0], rtol=0, atol=1e-12):
                raise ConfigError("table effect is not linear in (1, x); PL is undefined")
            out = np.zeros(spec.dim + 1)
            out[0] = effect[0]
            return out
        edges = np.concatenate([[-np.inf], spec.table.edges, [np.inf]])
        probs = np.diff(_index_cdf(spec, edges))
        return np.array([float(probs @ effect)])
    coef = spec.effect_coefficients
    if estimand == "PL":
        return coef.copy()
    return np.array([coef[0] + _covariate_mean(spec) * coef[1:].sum()])
