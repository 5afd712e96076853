"""Propensity functions, their families, and the finite feasible sets used in design.

A family is described by :class:`Family`. For a set of design points it
produces a feasible set whose free variables are either one value per group
of tied points (constant, monotone, Lipschitz and binned families) or mixture
weights over a fixed basis (parametric-simplex and expit-hull families).
Feasible sets know how to project, how to map their variables to values at
the points, and how to turn optimized variables into a :class:`PropensityFn`
that can be evaluated anywhere.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import comb, expit, ndtr

from batchpool import _qp
from batchpool.errors import ConfigError, DesignInfeasibleError, DimensionMismatchError

FAMILY_KINDS = ("constant", "monotone", "lipschitz", "binned", "parametric-simplex", "expit-hull")
CHAIN_KINDS = ("monotone", "lipschitz")
HULL_KINDS = ("parametric-simplex", "expit-hull")
MEMBERSHIP_TOL = 1e-8


@dataclass(frozen=True)
class Budget:
    """Interval ``[low, high]`` for the average propensity of a batch."""

    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        low, high = float(self.low), float(self.high)
        if not (0.0 <= low <= high <= 1.0):
            raise ConfigError(f"budget must satisfy 0 <= low <= high <= 1, got ({low}, {high})")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def exact(cls, value: float) -> "Budget":
        return cls(value, value)

    @property
    def equality(self) -> bool:
        return self.low == self.high

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.low + self.high)


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr, single = arr.reshape(1, 1), True
    elif arr.ndim == 1:
        single = dim > 1 or arr.size == 1
        arr = arr.reshape(1, -1) if dim > 1 else arr.reshape(-1, 1)
    else:
        single = False
    if arr.shape[1] != dim:
        raise DimensionMismatchError(f"expected {dim} coordinates, got shape {np.shape(x)}")
    return arr, single


def bin_labels(points: np.ndarray, edges) -> np.ndarray:
    """Cell index of the coordinate sum ``1'x`` for interior cut points ``edges``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.searchsorted(np.asarray(edges, dtype=float), points.sum(axis=1), side="right")


def quantile_edges(points: np.ndarray, bins: int) -> np.ndarray:
    """Interior cut points splitting ``1'x`` into ``bins`` equal-frequency cells."""
    if bins < 1:
        raise ConfigError("bins must be at least 1")
    index = np.atleast_2d(np.asarray(points, dtype=float)).sum(axis=1)
    return np.quantile(index, np.arange(1, bins) / bins)


def default_atoms(dim: int, levels=(-2, -1, 0, 1, 2), max_nonzero: int = 2) -> np.ndarray:
    """Coefficient grid for the expit hull over the basis ``(1, x')``.

    All vectors of length ``dim + 1`` with entries in ``levels`` and at most
    ``max_nonzero`` nonzero coordinates (925 atoms for ``dim = 10``).
    """
    p = dim + 1
    nonzero = [v for v in levels if v != 0]
    atoms = [np.zeros(p)]
    for k in range(1, max_nonzero + 1):
        for idx in itertools.combinations(range(p), k):
            for vals in itertools.product(nonzero, repeat=k):
                atom = np.zeros(p)
                atom[list(idx)] = vals
                atoms.append(atom)
    return np.array(atoms)


def bernstein_basis(points: np.ndarray, degree: int, transform: str = "probit") -> np.ndarray:
    """Bernstein polynomials of a scalar index mapped into [0, 1].

    ``transform='probit'`` uses ``Phi(1'x / sqrt(d))``; ``'unit'`` uses the
    coordinate mean clipped to [0, 1]. The basis is nonnegative and sums to one.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = points.shape[1]
    if transform == "probit":
        u = ndtr(points.sum(axis=1) / math.sqrt(d))
    elif transform == "unit":
        u = np.clip(points.mean(axis=1), 0.0, 1.0)
    else:
        raise ConfigError(f"unknown basis transform {transform!r}")
    j = np.arange(degree + 1)
    return comb(degree, j)[None, :] * u[:, None] ** j * (1.0 - u[:, None]) ** (degree - j)


# ---------------------------------------------------------------------------
# Propensity functions
# ---------------------------------------------------------------------------


class PropensityFn:
    """A propensity score ``x -> Pr(Z = 1 | X = x)`` from a known family.

    Values are clipped to ``[clip_gamma, 1 - clip_gamma]`` on evaluation.
    Instances are immutable and safe to share.
    """

    family = "abstract"

    def __init__(self, dim: int, clip_gamma: float = 0.0):
        if not 0.0 <= clip_gamma < 0.5:
            raise ConfigError("clip_gamma must lie in [0, 0.5)")
        self.dim = int(dim)
        self.clip_gamma = float(clip_gamma)

    def _raw(self, points: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def evaluate(self, x):
        """Propensity at one point (returns float) or at rows of an array."""
        points, single = _as_points(x, self.dim)
        vals = np.clip(self._raw(points), self.clip_gamma, 1.0 - self.clip_gamma)
        return float(vals[0]) if single else vals

    __call__ = evaluate

    def to_dict(self) -> dict:
        return {"family": self.family, "dim": self.dim, "clip_gamma": self.clip_gamma}


class ConstantPropensity(PropensityFn):
    family = "constant"

    def __init__(self, value: float, dim: int = 1, clip_gamma: float = 0.0):
        super().__init__(dim, clip_gamma)
        if not 0.0 <= value <= 1.0:
            raise ConfigError("constant propensity must lie in [0, 1]")
        self.value = float(value)

    def _raw(self, points):
        return np.full(points.shape[0], self.value)

    def to_dict(self):
        return {**super().to_dict(), "value": self.value}


class ChainPropensity(PropensityFn):
    """Monotone or Lipschitz propensity in one dimension.

    Stored as knots and values; evaluation interpolates linearly between
    knots and is flat outside their range. Linear interpolation preserves
    both monotonicity and the Lipschitz bound of the knot values.
    """

    def __init__(self, kind: str, knots, values, lipschitz: float | None = None,
                 clip_gamma: float = 0.0):
        super().__init__(1, clip_gamma)
        if kind not in CHAIN_KINDS:
            raise ConfigError(f"chain propensity kind must be one of {CHAIN_KINDS}")
        self.family = kind
        self.knots = np.asarray(knots, dtype=float).ravel().copy()
        self.values = np.asarray(values, dtype=float).ravel().copy()
        self.lipschitz = None if lipschitz is None else float(lipschitz)
        if self.knots.shape != self.values.shape or self.knots.size == 0:
            raise ConfigError("knots and values must be nonempty and aligned")
        if np.any(np.diff(self.knots) <= 0):
            raise ConfigError("knots must be strictly increasing")
        self.knots.setflags(write=False)
        self.values.setflags(write=False)

    def _raw(self, points):
        return np.interp(points[:, 0], self.knots, self.values)

    def to_dict(self):
        out = {**super().to_dict(), "knots": self.knots.tolist(), "values": self.values.tolist()}
        if self.lipschitz is not None:
            out["lipschitz"] = self.lipschitz
        return out


class BinnedPropensity(PropensityFn):
    """Propensity constant on cells of the coordinate sum ``1'x``."""

    family = "binned"

    def __init__(self, edges, values, dim: int = 1, clip_gamma: float = 0.0):
        super().__init__(dim, clip_gamma)
        self.edges = np.asarray(edges, dtype=float).ravel().copy()
        self.values = np.asarray(values, dtype=float).ravel().copy()
        if self.values.size != self.edges.size + 1:
            raise ConfigError("binned propensity needs one value per cell")
        self.edges.setflags(write=False)
        self.values.setflags(write=False)

    def _raw(self, points):
        return self.values[bin_labels(points, self.edges)]

    def to_dict(self):
        return {**super().to_dict(), "edges": self.edges.tolist(), "values": self.values.tolist()}


class HullPropensity(PropensityFn):
    """Convex combination (with total weight at most one) of fixed basis functions."""

    def __init__(self, kind: str, weights, dim: int, atoms=None, degree: int = 4,
                 transform: str = "probit", clip_gamma: float = 0.0):
        super().__init__(dim, clip_gamma)
        if kind not in HULL_KINDS:
            raise ConfigError(f"hull propensity kind must be one of {HULL_KINDS}")
        self.family = kind
        self.weights = np.asarray(weights, dtype=float).ravel().copy()
        if kind == "expit-hull":
            self.atoms = np.asarray(atoms if atoms is not None else default_atoms(dim), dtype=float)
            if self.atoms.shape != (self.weights.size, dim + 1):
                raise ConfigError("atoms must have one row per weight and dim + 1 columns")
            self.atoms.setflags(write=False)
        else:
            self.atoms = None
            if self.weights.size != degree + 1:
                raise ConfigError("parametric-simplex weights must have degree + 1 entries")
        self.degree = int(degree)
        self.transform = transform
        if np.any(self.weights < -MEMBERSHIP_TOL) or self.weights.sum() > 1 + MEMBERSHIP_TOL:
            raise ConfigError("hull weights must be nonnegative with total at most one")
        self.weights.setflags(write=False)

    def basis(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.family == "expit-hull":
            design = np.column_stack([np.ones(points.shape[0]), points])
            return expit(design @ self.atoms.T)
        return bernstein_basis(points, self.degree, self.transform)

    def _raw(self, points):
        return self.basis(points) @ self.weights

    def to_dict(self):
        out = {**super().to_dict(), "weights": self.weights.tolist()}
        if self.family == "expit-hull":
            out["atoms"] = self.atoms.tolist()
        else:
            out.update(degree=self.degree, transform=self.transform)
        return out


def propensity_from_dict(data: dict) -> PropensityFn:
    """Inverse of ``PropensityFn.to_dict``."""
    kind = data["family"]
    gamma = data.get("clip_gamma", 0.0)
    dim = data.get("dim", 1)
    if kind == "constant":
        return ConstantPropensity(data["value"], dim=dim, clip_gamma=gamma)
    if kind in CHAIN_KINDS:
        return ChainPropensity(kind, data["knots"], data["values"], data.get("lipschitz"), gamma)
    if kind == "binned":
        return BinnedPropensity(data["edges"], data["values"], dim=dim, clip_gamma=gamma)
    if kind in HULL_KINDS:
        return HullPropensity(kind, data["weights"], dim, atoms=data.get("atoms"),
                              degree=data.get("degree", 4), transform=data.get("transform", "probit"),
                              clip_gamma=gamma)
    raise ConfigError(f"unknown propensity family {kind!r}")


# ---------------------------------------------------------------------------
# Families and feasible sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    """A function family for the propensity score.

    Parameters
    ----------
    kind : str
        ``constant``, ``monotone``, ``lipschitz``, ``binned``,
        ``parametric-simplex`` or ``expit-hull``.
    lipschitz : float
        Lipschitz constant for the ``lipschitz`` family.
    clip_gamma : float
        Values are kept in ``[clip_gamma, 1 - clip_gamma]``; for grouped
        families this box is part of the feasible set.
    bins : int
        Number of equal-frequency cells for ``binned`` when ``edges`` is unset.
    edges : tuple of float, optional
        Fixed interior cut points of ``1'x`` for ``binned``.
    degree, transform : int, str
        Bernstein basis settings for ``parametric-simplex``.
    atoms : tuple, optional
        Coefficient rows for ``expit-hull``; defaults to :func:`default_atoms`.
    """

    kind: str
    lipschitz: float = 1.0
    clip_gamma: float = 0.0
    bins: int = 4
    edges: tuple | None = None
    degree: int = 4
    transform: str = "probit"
    atoms: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ConfigError(f"unknown family {self.kind!r}; expected one of {FAMILY_KINDS}")
        if self.lipschitz <= 0:
            raise ConfigError("Lipschitz constant must be positive")
        if not 0.0 <= self.clip_gamma < 0.5:
            raise ConfigError("clip_gamma must lie in [0, 0.5)")
        if self.edges is not None:
            object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        if self.atoms is not None:
            object.__setattr__(self, "atoms", tuple(tuple(float(v) for v in row) for row in self.atoms))

    def with_edges(self, edges) -> "Family":
        return Family(self.kind, self.lipschitz, self.clip_gamma, self.bins, tuple(edges),
                      self.degree, self.transform, self.atoms)

    def with_gamma(self, gamma: float) -> "Family":
        return Family(self.kind, self.lipschitz, gamma, self.bins, self.edges,
                      self.degree, self.transform, self.atoms)

    def feasible_set(self, points, budget: Budget):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.ndim != 2:
            raise DimensionMismatchError("points must be a 2-d array")
        if self.kind in HULL_KINDS:
            return HullSet(self, points, budget)
        return GroupedSet(self, points, budget)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "clip_gamma": self.clip_gamma}
        if self.kind == "lipschitz":
            out["lipschitz"] = self.lipschitz
        if self.kind == "binned":
            out["bins"] = self.bins
            if self.edges is not None:
                out["edges"] = list(self.edges)
        if self.kind == "parametric-simplex":
            out.update(degree=self.degree, transform=self.transform)
        return out


class GroupedSet:
    """Feasible set whose variables are one value per group of points.

    Groups are tied covariate values (monotone, Lipschitz), cells (binned) or
    a single group (constant). The mean budget applies to point values, so
    group ``g`` carries weight ``count_g / n`` in the budget row.
    """

    def __init__(self, family: Family, points: np.ndarray, budget: Budget):
        self.family = family
        self.points = points
        self.budget = budget
        self.n, self.dim = points.shape
        self.lb = family.clip_gamma
        self.ub = 1.0 - family.clip_gamma
        kind = family.kind
        self.lo = self.hi = None
        if kind == "constant":
            self.groups = np.zeros(self.n, dtype=int)
            self.n_vars = 1
        elif kind in CHAIN_KINDS:
            if self.dim != 1:
                raise DimensionMismatchError(f"{kind} family is defined for one covariate only")
            self.knots, self.groups = np.unique(points[:, 0], return_inverse=True)
            self.n_vars = self.knots.size
            gaps = np.diff(self.knots)
            if kind == "monotone":
                self.lo, self.hi = np.zeros_like(gaps), np.full_like(gaps, np.inf)
            else:
                self.lo, self.hi = -family.lipschitz * gaps, family.lipschitz * gaps
        else:
            edges = family.edges if family.edges is not None else quantile_edges(points, family.bins)
            self.edges = np.asarray(edges, dtype=float)
            labels = bin_labels(points, self.edges)
            self.cells, self.groups = np.unique(labels, return_inverse=True)
            self.n_vars = self.cells.size
        self.groups = self.groups.ravel()
        self.counts = np.bincount(self.groups, minlength=self.n_vars).astype(float)
        self.mean_weights = self.counts / self.n
        self._aggregate = sparse.csr_matrix(
            (np.ones(self.n), (self.groups, np.arange(self.n))), shape=(self.n_vars, self.n)
        )
        if budget.low > self.ub + 1e-12 or budget.high < self.lb - 1e-12:
            raise DesignInfeasibleError(
                f"budget [{budget.low}, {budget.high}] cannot be met with values in "
                f"[{self.lb}, {self.ub}]"
            )

    # variable <-> point maps
    def values(self, u):
        return np.asarray(u, dtype=float)[self.groups]

    def pullback(self, g):
        return self._aggregate @ np.asarray(g, dtype=float)

    def group_means(self, point_values):
        return self.pullback(point_values) / self.counts

    def mean(self, u) -> float:
        return float(self.mean_weights @ u)

    def initial(self):
        start = min(max(self.budget.midpoint, self.lb), self.ub)
        return np.full(self.n_vars, start)

    def project(self, y, weights=None):
        """Weighted Euclidean projection of group values ``y`` onto the set."""
        y = np.asarray(y, dtype=float)
        w = self.counts if weights is None else np.asarray(weights, dtype=float)
        low, high = self.budget.low, self.budget.high
        a = self.mean_weights
        if self.family.kind in ("constant", "binned"):
            return _qp.box_slab_projection(y, w, a, self.lb, self.ub, low, high)
        if self.family.kind == "monotone":
            return _qp.isotonic_slab_projection(y, w, a, self.lb, self.ub, low, high)
        u, _ = _qp.chain_qp(w, w * y, self.lo, self.hi, self.lb, self.ub, a, low, high)
        return u

    def scaled_step(self, u, grad, curvature, lowrank=None):
        """Maximizer over the set of the quadratic model ``g'(v-u) - 0.5 (v-u)'H(v-u)``.

        ``H = diag(curvature) + B B'`` with ``B = lowrank`` (variable space).
        """
        if lowrank is None and self.family.kind != "lipschitz":
            return self.project(u + grad / curvature, curvature)
        linear = grad + curvature * u
        if lowrank is not None:
            linear = linear + lowrank @ (lowrank.T @ u)
        lo, hi = self.lo, self.hi
        v, _ = _qp.chain_qp(curvature, linear, lo, hi, self.lb, self.ub, self.mean_weights,
                            self.budget.low, self.budget.high, lowrank=lowrank)
        return v

    def contains(self, u, tol: float = MEMBERSHIP_TOL) -> bool:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_vars,):
            return False
        if np.any(u < self.lb - tol) or np.any(u > self.ub + tol):
            return False
        if self.lo is not None and u.size > 1:
            du = np.diff(u)
            if np.any(du < self.lo - tol) or np.any(du > self.hi + tol):
                return False
        mean = self.mean(u)
        return self.budget.low - tol <= mean <= self.budget.high + tol

    def to_function(self, u) -> PropensityFn:
        u = np.asarray(u, dtype=float)
        gamma = self.family.clip_gamma
        kind = self.family.kind
        if kind == "constant":
            return ConstantPropensity(float(u[0]), dim=self.dim, clip_gamma=gamma)
        if kind in CHAIN_KINDS:
            lip = self.family.lipschitz if kind == "lipschitz" else None
            return ChainPropensity(kind, self.knots, u, lip, gamma)
        # Cells without design points take the value of the nearest populated cell.
        all_cells = np.arange(self.edges.size + 1)
        nearest = np.abs(all_cells[:, None] - self.cells[None, :]).argmin(axis=1)
        return BinnedPropensity(self.edges, u[nearest], dim=self.dim, clip_gamma=gamma)


class HullSet:
    """Feasible set of mixture weights ``w >= 0, sum(w) <= 1`` over a basis."""

    def __init__(self, family: Family, points: np.ndarray, budget: Budget):
        self.family = family
        self.points = points
        self.budget = budget
        self.n, self.dim = points.shape
        if family.kind == "expit-hull":
            self.atoms = np.asarray(family.atoms if family.atoms is not None else default_atoms(self.dim))
            if self.atoms.shape[1] != self.dim + 1:
                raise DimensionMismatchError("atoms must have dim + 1 columns")
        else:
            self.atoms = None
        self.basis = self._template(np.zeros(self.atoms.shape[0] if self.atoms is not None
                                             else family.degree + 1)).basis(points)
        self.n_vars = self.basis.shape[1]
        self.mean_weights = self.basis.mean(axis=0)
        if budget.low > max(self.mean_weights.max(), 0.0) + 1e-12:
            raise DesignInfeasibleError(
                f"budget lower bound {budget.low} exceeds the largest attainable mean "
                f"{self.mean_weights.max():.6g}"
            )

    def _template(self, weights):
        return HullPropensity(self.family.kind, weights, self.dim, atoms=self.atoms,
                              degree=self.family.degree, transform=self.family.transform,
                              clip_gamma=self.family.clip_gamma)

    def values(self, w):
        return self.basis @ np.asarray(w, dtype=float)

    def pullback(self, g):
        return self.basis.T @ np.asarray(g, dtype=float)

    def mean(self, w) -> float:
        return float(self.mean_weights @ w)

    def project(self, y, weights=None):
        return _qp.simplex_slab_projection(y, self.mean_weights, self.budget.low, self.budget.high)

    def initial(self):
        target = self.budget.midpoint
        # Prefer a constant function: a basis column that is (nearly) constant
        # and at least the target, scaled down to hit the target exactly.
        spread = self.basis.max(axis=0) - self.basis.min(axis=0)
        level = self.basis.mean(axis=0)
        flat = np.nonzero((spread <= 1e-12) & (level >= target) & (level > 0))[0]
        if flat.size:
            j = flat[np.argmin(level[flat])]
            w = np.zeros(self.n_vars)
            w[j] = target / level[j]
            return w
        row_sum = self.basis.sum(axis=1)
        if np.ptp(row_sum) <= 1e-12 and row_sum[0] > 0:
            return np.full(self.n_vars, target / (row_sum[0]))
        return self.project(np.full(self.n_vars, 1.0 / self.n_vars))

    def contains(self, w, tol: float = MEMBERSHIP_TOL) -> bool:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_vars,) or np.any(w < -tol) or w.sum() > 1 + tol:
            return False
        mean = self.mean(w)
        return self.budget.low - tol <= mean <= self.budget.high + tol

    def to_function(self, w) -> PropensityFn:
        return self._template(np.clip(np.asarray(w, dtype=float), 0.0, None))


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------


def evaluate(e: PropensityFn, x):
    """Evaluate a propensity function at a point or rows of an array."""
    return e.evaluate(x)


def mixture(e_list, weights, x):
    """Weighted average ``sum_t w_t e_t(x) / sum_t w_t`` of propensity functions."""
    e_list = list(e_list)
    if not e_list:
        raise ConfigError("mixture needs at least one propensity")
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.size != len(e_list):
        raise ConfigError("one weight per propensity is required")
    if np.any(weights <= 0):
        raise ConfigError("mixture weights must be positive")
    total = sum(w * np.asarray(e.evaluate(x), dtype=float) for w, e in zip(weights, e_list))
    out = total / weights.sum()
    return float(out) if np.ndim(out) == 0 else out


def feasible_set_projection(family: Family, points, candidate, budget: Budget) -> np.ndarray:
    """Euclidean projection onto the family's finite feasible set with the budget.

    For grouped families ``candidate`` holds one value per point and the
    result is too; tied points are forced to share a value. For hull
    families ``candidate`` and the result are mixture-weight vectors.
    """
    fs = family.feasible_set(points, budget)
    candidate = np.asarray(candidate, dtype=float)
    if isinstance(fs, HullSet):
        if candidate.shape != (fs.n_vars,):
            raise DimensionMismatchError(f"expected {fs.n_vars} weights")
        return fs.project(candidate)
    if candidate.shape != (fs.n,):
        raise DimensionMismatchError(f"expected {fs.n} values, got {candidate.shape}")
    return fs.values(fs.project(fs.group_means(candidate)))


def from_finite_values(family: Family, points, values) -> PropensityFn:
    """Family member that reproduces ``values`` at ``points``.

    Raises
    ------
    ConfigError
        If the values are not attainable within the family (tolerance 1e-8).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    if family.kind in HULL_KINDS:
        fs = family.feasible_set(points, Budget(0.0, 1.0))
        if not fs.contains(values):
            raise ConfigError("weights are not in the capped simplex")
        return fs.to_function(values)
    # Membership is checked against [0, 1]; clipping applies only on evaluation.
    fs = family.with_gamma(0.0).feasible_set(points, Budget(0.0, 1.0))
    if values.shape != (fs.n,):
        raise DimensionMismatchError(f"expected {fs.n} values")
    u = fs.group_means(values)
    if np.abs(fs.values(u) - values).max(initial=0.0) > MEMBERSHIP_TOL:
        raise ConfigError("tied points carry different values")
    if not fs.contains(u):
        raise ConfigError(f"values violate the {family.kind} family constraints")
    return propensity_from_dict({**fs.to_function(u).to_dict(), "clip_gamma": family.clip_gamma})


def assign_treatments(values, uniforms) -> np.ndarray:
    """Treatment indicators ``Z = 1(U <= e)``."""
    values = np.asarray(values, dtype=float)
    uniforms = np.asarray(uniforms, dtype=float)
    if values.shape != uniforms.shape:
        raise DimensionMismatchError("values and uniforms must be aligned")
    return (uniforms <= values).astype(np.int8)
