"""Concave design problems: choose propensity values that maximize efficiency.

The decision variable is the vector of current-batch propensity values at
the design points, restricted to the family's finite feasible set and the
budget. The pooled propensity seen by the estimator is the mixture
``prior_mix + current_weight * e``.

Grouped families (constant, monotone, Lipschitz, binned) are solved by a
projected Newton method: each step maximizes the exact quadratic model of
the objective over the feasible set (a tridiagonal-plus-low-rank QP) and an
Armijo backtracking search runs along the resulting feasible direction.
Hull families run projected gradient ascent with Barzilai-Borwein scaling in
mixture-weight space.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from batchpool.dgp import default_basis
from batchpool.errors import ConfigError, DesignInfeasibleError, DimensionMismatchError
from batchpool.errors import NumericalError, SingularInformationError
from batchpool.propensity import Budget, Family, GroupedSet, HullSet, PropensityFn
from batchpool.scores import VARIANCE_FLOOR
from batchpool.variance import psi_value_and_grad

OBJECTIVES = ("AIPW", "EPL")
PSI_KINDS = ("A-opt", "D-opt")
METRICS = ("newton", "identity")
ARMIJO_C = 1e-4
NEG_INF = float("-inf")


@dataclass
class DesignProblem:
    """One design instance.

    Parameters
    ----------
    points : ndarray, shape (n, d)
        Design covariates.
    v0, v1 : ndarray, shape (n,)
        Plug-in conditional variances at the points (floored at ``floor``).
    family : Family
    budget : Budget
    objective : {"AIPW", "EPL"}
    psi_kind : {"A-opt", "D-opt"}
        Information function. For AIPW the A-optimal objective is minus the
        plug-in variance and the D-optimal one is minus its logarithm.
    prior_mix : ndarray, shape (n,), optional
        ``sum_{u<t} N_u e_u(x_i) / N_{1:t}``; zero for a first design.
    current_weight : float
        ``N_t / N_{1:t}``.
    psi : ndarray, shape (n, p), optional
        EPL basis values; defaults to ``(1, x')``.
    """

    points: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    family: Family
    budget: Budget
    objective: str = "AIPW"
    psi_kind: str = "A-opt"
    prior_mix: np.ndarray | None = None
    current_weight: float = 1.0
    psi: np.ndarray | None = None
    floor: float = VARIANCE_FLOOR
    _fs: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        self.points = pts[:, None] if pts.ndim == 1 else pts
        n = self.points.shape[0]
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.psi_kind not in PSI_KINDS:
            raise ConfigError(f"unknown information function {self.psi_kind!r}")
        v0 = np.broadcast_to(np.asarray(self.v0, dtype=float), (n,))
        v1 = np.broadcast_to(np.asarray(self.v1, dtype=float), (n,))
        if np.any(~np.isfinite(v0)) or np.any(~np.isfinite(v1)):
            raise ConfigError("variances must be finite")
        self.v0 = np.maximum(v0, self.floor)
        self.v1 = np.maximum(v1, self.floor)
        prior = np.zeros(n) if self.prior_mix is None else np.asarray(self.prior_mix, dtype=float)
        if prior.shape != (n,):
            raise DimensionMismatchError("prior_mix must have one entry per point")
        self.prior_mix = prior
        w = float(self.current_weight)
        if not 0.0 < w <= 1.0:
            raise ConfigError("current_weight must lie in (0, 1]")
        if np.any(prior < 0) or np.any(prior + w > 1.0 + 1e-12):
            raise ConfigError("prior_mix and current_weight must keep the mixture in [0, 1]")
        self.current_weight = w
        if self.objective == "EPL":
            basis = default_basis(self.points) if self.psi is None else np.asarray(self.psi, dtype=float)
            basis = basis[:, None] if basis.ndim == 1 else basis
            if basis.shape[0] != n:
                raise DimensionMismatchError("psi must have one row per point")
            self.psi = basis

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def feasible_set(self):
        if self._fs is None:
            self._fs = self.family.feasible_set(self.points, self.budget)
        return self._fs

    def mixture(self, values) -> np.ndarray:
        return self.prior_mix + self.current_weight * np.asarray(values, dtype=float)


@dataclass
class _Eval:
    value: float
    grad: np.ndarray | None = None
    curvature: np.ndarray | None = None
    lowrank: np.ndarray | None = None


def _evaluate(problem: DesignProblem, values, order: int = 1) -> _Eval:
    """Objective, point gradient and (order 2) negative-Hessian pieces.

    Returns ``-inf`` when the mixture leaves (0, 1) (AIPW) or the information
    matrix is singular (EPL).
    """
    e = problem.mixture(values)
    w, n = problem.current_weight, problem.n
    v0, v1 = problem.v0, problem.v1
    if problem.objective == "AIPW":
        if np.any(e <= 0.0) or np.any(e >= 1.0):
            return _Eval(NEG_INF)
        q = 1.0 - e
        var = float(np.mean(v1 / e + v0 / q))
        d_var = (w / n) * (v0 / q**2 - v1 / e**2)
        if problem.psi_kind == "A-opt":
            out = _Eval(-var, -d_var if order else None)
            scale = 1.0
        else:
            out = _Eval(-math.log(var), -d_var / var if order else None)
            scale = 1.0 / var
        if order >= 2:
            # For the log objective the curvature of the variance divided by
            # the variance majorizes the true negative Hessian.
            out.curvature = scale * (2.0 * w * w / n) * (v1 / e**3 + v0 / q**3)
        return out

    if np.any(e < 0.0) or np.any(e > 1.0):
        return _Eval(NEG_INF)
    psi = problem.psi
    denom = v0 * e + v1 * (1.0 - e)
    rho = e * (1.0 - e) / denom
    info = (psi * rho[:, None]).T @ psi / n
    value, grad_m = psi_value_and_grad(problem.psi_kind, info, gradient=False)
    if not np.isfinite(value):
        return _Eval(NEG_INF)
    if not order:
        return _Eval(value)
    _, grad_m = psi_value_and_grad(problem.psi_kind, info)
    d_rho = (v1 * (1.0 - e) ** 2 - v0 * e**2) / denom**2
    quad = np.einsum("ij,jk,ik->i", psi, grad_m, psi)
    out = _Eval(value, (w / n) * d_rho * quad)
    if order >= 2:
        out.curvature = (w * w / n) * (2.0 * v0 * v1 / denom**3) * quad
        evals, evecs = np.linalg.eigh(0.5 * (info + info.T))
        inv_half = (evecs / np.sqrt(evals)) @ evecs.T
        right = psi @ inv_half
        left = psi @ (inv_half @ inv_half) if problem.psi_kind == "A-opt" else right
        factor = (w / n) * d_rho * (math.sqrt(2.0) if problem.psi_kind == "A-opt" else 1.0)
        out.lowrank = factor[:, None] * (left[:, :, None] * right[:, None, :]).reshape(n, -1)
    return out


def objective_and_gradient(values, problem: DesignProblem):
    """Design objective and its gradient with respect to the point values.

    Raises
    ------
    NumericalError
        If the pooled propensity leaves (0, 1) or the information matrix is
        singular.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (problem.n,):
        raise DimensionMismatchError(f"expected {problem.n} values")
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise NumericalError("propensity values must lie in [0, 1]")
    ev = _evaluate(problem, values)
    if not np.isfinite(ev.value):
        if problem.objective == "AIPW":
            raise NumericalError("pooled propensity touches 0 or 1")
        raise SingularInformationError("information matrix is singular at these values")
    return ev.value, ev.grad


@dataclass
class DesignDiagnostics:
    """Solver report: status is ``converged``, ``max_iter`` or ``stalled``."""

    iterations: int
    objective: float
    projected_gradient_norm: float
    status: str
    trace: list = field(default_factory=list)

    def to_dict(self, with_trace: bool = False) -> dict:
        out = {"iterations": self.iterations, "objective": self.objective,
               "projected_gradient_norm": self.projected_gradient_norm, "status": self.status}
        if with_trace:
            out["trace"] = list(self.trace)
        return out


@dataclass
class DesignResult:
    """Optimized point values, the solver variables and the fitted function."""

    values: np.ndarray
    variables: np.ndarray
    function: PropensityFn
    diagnostics: DesignDiagnostics


def _initial_variables(fs, init):
    if init is None:
        u = fs.initial()
    elif isinstance(fs, HullSet):
        u = fs.project(np.asarray(init, dtype=float))
    else:
        u = fs.project(fs.group_means(np.asarray(init, dtype=float)))
    if not fs.contains(u, tol=1e-7):
        raise DesignInfeasibleError("no feasible starting point for the design problem")
    return u


def maximize_design(problem: DesignProblem, init=None, tol: float = 1e-8, max_iter: int = 5000,
                    metric: str = "newton", keep_trace: bool = False) -> DesignResult:
    """Maximize the design objective over the family's feasible set.

    Parameters
    ----------
    problem : DesignProblem
    init : ndarray, optional
        Starting point values (mixture weights for hull families). Defaults
        to the clamped budget midpoint as a constant function.
    tol : float
        Stop when the sup-norm of the projected step is at most ``tol``. With
        ``metric="newton"`` the step is the projected Newton step; otherwise
        it is the unit projected-gradient step.
    max_iter : int
    metric : {"newton", "identity"}
        Scaling used for grouped families; hull families always use the
        identity metric with Barzilai-Borwein step sizes.

    Returns
    -------
    DesignResult
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    fs = problem.feasible_set
    hull = isinstance(fs, HullSet)
    newton = metric == "newton" and not hull
    u = _initial_variables(fs, init)
    ev = _evaluate(problem, fs.values(u), order=2 if newton else 1)
    if not np.isfinite(ev.value):
        raise SingularInformationError("design objective is -inf at the starting point")
    weights = np.ones(fs.n_vars) if hull else fs.counts
    step_scale = 1.0
    trace = [ev.value] if keep_trace else []
    status, stat, it = "max_iter", np.inf, 0
    prev = None
    for it in range(1, max_iter + 1):
        g = fs.pullback(ev.grad)
        if newton:
            lowrank = None if ev.lowrank is None else fs.pullback(ev.lowrank)
            target = fs.scaled_step(u, g, fs.pullback(ev.curvature), lowrank)
            stat = float(np.abs(target - u).max())
        else:
            unit = fs.project(u + g / weights) if hull else fs.scaled_step(u, g, weights)
            stat = float(np.abs(unit - u).max())
            if prev is not None:
                du, dg = u - prev[0], g - prev[1]
                curv = -float(dg @ du) / max(float(du @ (weights * du)), 1e-300)
                step_scale = min(max(curv, 1e-10), 1e10) if curv > 0 else step_scale
            target = (fs.project(u + g / (weights * step_scale)) if hull
                      else fs.scaled_step(u, g, weights * step_scale))
        if stat <= tol:
            status = "converged"
            break
        direction = target - u
        slope = float(g @ direction)
        floor = 8.0 * np.finfo(float).eps * max(1.0, abs(ev.value))
        if newton and slope <= floor:
            # The inner QP is only accurate to its own tolerance; near the
            # optimum fall back to a diagonal majorizer of the Hessian.
            curvature = fs.pullback(ev.curvature)
            if ev.lowrank is not None:
                curvature = curvature + np.linalg.norm(lowrank, 2) ** 2
            target = fs.scaled_step(u, g, curvature)
            stat = float(np.abs(target - u).max())
            if stat <= tol:
                status = "converged"
                break
            direction = target - u
            slope = float(g @ direction)
        if slope <= floor:
            # No increase is representable in floating point.
            status = "converged" if slope >= -floor else "stalled"
            break
        s, accepted = 1.0, None
        while s >= 1e-20:
            trial = u + s * direction
            if not hull:
                trial = np.clip(trial, fs.lb, fs.ub)
            value = _evaluate(problem, fs.values(trial), order=0).value
            if np.isfinite(value) and (value >= ev.value + ARMIJO_C * s * slope
                                       or (s == 1.0 and value >= ev.value)):
                accepted = trial
                break
            s *= 0.5
        if accepted is None:
            status = "stalled"
            break
        prev = (u, g)
        u = accepted
        ev = _evaluate(problem, fs.values(u), order=2 if newton else 1)
        if keep_trace:
            trace.append(ev.value)
    diagnostics = DesignDiagnostics(it, ev.value, stat, status, trace)
    return DesignResult(fs.values(u), u, fs.to_function(u), diagnostics)


def _batch_objective(problem: DesignProblem, values: np.ndarray) -> np.ndarray:
    """Objective for each row of point values; ``-inf`` where undefined."""
    e = problem.prior_mix + problem.current_weight * values
    v0, v1 = problem.v0, problem.v1
    with np.errstate(divide="ignore", invalid="ignore"):
        if problem.objective == "AIPW":
            var = np.mean(v1 / e + v0 / (1.0 - e), axis=1)
            bad = np.any((e <= 0.0) | (e >= 1.0), axis=1)
            out = -var if problem.psi_kind == "A-opt" else -np.log(var)
            return np.where(bad, NEG_INF, out)
        rho = e * (1.0 - e) / (v0 * e + v1 * (1.0 - e))
        psi = problem.psi
        info = np.einsum("gi,ij,ik->gjk", rho, psi, psi) / problem.n
        eig = np.linalg.eigvalsh(info)
        singular = eig[:, 0] <= 1e-14 * np.maximum(1.0, np.abs(eig[:, -1]))
        if problem.psi_kind == "A-opt":
            out = -np.sum(1.0 / eig, axis=1)
        else:
            out = np.sum(np.log(np.abs(eig)), axis=1)
        return np.where(singular, NEG_INF, out)


def brute_force_design(problem: DesignProblem, grid_resolution: int = 41,
                       chunk: int = 200_000) -> np.ndarray:
    """Exhaustive search over a uniform grid on [0, 1] per free value.

    Only grouped families are supported; tied points share one grid
    coordinate. Ties in the objective go to the first candidate in
    lexicographic order.

    Raises
    ------
    ConfigError
        For more than five points or hull families.
    DesignInfeasibleError
        If no grid point is feasible.
    """
    if problem.n > 5:
        raise ConfigError("brute force is limited to at most five points")
    fs = problem.feasible_set
    if not isinstance(fs, GroupedSet):
        raise ConfigError("brute force supports grouped families only")
    grid = np.linspace(0.0, 1.0, grid_resolution)
    best_value, best = NEG_INF, None
    combos = itertools.product(range(grid_resolution), repeat=fs.n_vars)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=int)
        if block.size == 0:
            break
        cand = grid[block.reshape(-1, fs.n_vars)]
        ok = np.all((cand >= fs.lb - 1e-12) & (cand <= fs.ub + 1e-12), axis=1)
        if fs.lo is not None and fs.n_vars > 1:
            diffs = np.diff(cand, axis=1)
            ok &= np.all((diffs >= fs.lo - 1e-12) & (diffs <= fs.hi + 1e-12), axis=1)
        means = cand @ fs.mean_weights
        ok &= (means >= problem.budget.low - 1e-12) & (means <= problem.budget.high + 1e-12)
        rows = np.nonzero(ok)[0]
        if rows.size:
            values = _batch_objective(problem, cand[rows][:, fs.groups])
            j = int(np.argmax(values))
            if values[j] > best_value:
                best_value, best = float(values[j]), cand[rows[j]]
    if best is None:
        raise DesignInfeasibleError("no grid point satisfies the constraints")
    return fs.values(best)
