import math

import numpy as np
import pytest

from batchpool import dgp
from batchpool import optimizer as opt
from batchpool import propensity as prop
from batchpool.errors import ConfigError, DesignInfeasibleError, NumericalError


@pytest.fixture
def points(rng):
    return np.sort(rng.normal(size=60))[:, None]


def _problem(points, v0=1.0, v1=1.0, kind="lipschitz", budget=prop.Budget(0, 1), **kw):
    return opt.DesignProblem(points, v0, v1, prop.Family(kind, lipschitz=kw.pop("lipschitz", 1.0)),
                             budget, **kw)


class TestClosedForms:
    def test_neyman_constant(self, points):
        res = opt.maximize_design(_problem(points, 1.0, 4.0, "constant"))
        assert res.values[0] == pytest.approx(2 / 3, abs=1e-7)

    def test_equality_budget_homoskedastic_is_flat(self, points):
        res = opt.maximize_design(_problem(points, budget=prop.Budget.exact(0.2)))
        np.testing.assert_allclose(res.values, 0.2, atol=1e-6)
        assert res.diagnostics.status == "converged"

    def test_proportional_variances_give_constant_neyman(self, points):
        spec = dgp.DGPSpec(var_kind="heteroskedastic")
        v0, v1 = dgp.var_fn(spec, 0, points), dgp.var_fn(spec, 1, points)
        res = opt.maximize_design(_problem(points, v0, v1))
        np.testing.assert_allclose(res.values, math.sqrt(2) / (1 + math.sqrt(2)), atol=1e-6)

    def test_budget_binds(self, points):
        res = opt.maximize_design(_problem(points, kind="constant", budget=prop.Budget(0.6, 0.9)))
        assert res.values[0] == pytest.approx(0.6, abs=1e-8)

    def test_prior_mixture_shifts_target(self, points):
        n = points.shape[0]
        res = opt.maximize_design(_problem(points, kind="constant", prior_mix=np.full(n, 0.1),
                                           current_weight=0.5))
        assert res.values[0] == pytest.approx(0.8, abs=1e-7)

    @pytest.mark.parametrize("psi_kind", ["A-opt", "D-opt"])
    def test_epl_homoskedastic_half(self, points, psi_kind):
        res = opt.maximize_design(_problem(points, kind="constant", objective="EPL", psi_kind=psi_kind))
        assert res.values[0] == pytest.approx(0.5, abs=1e-7)

    def test_log_objective_same_maximizer(self, points, rng):
        v1 = rng.uniform(0.5, 3, size=points.shape[0])
        a = opt.maximize_design(_problem(points, 1.0, v1, budget=prop.Budget.exact(0.3)))
        d = opt.maximize_design(_problem(points, 1.0, v1, budget=prop.Budget.exact(0.3), psi_kind="D-opt"))
        np.testing.assert_allclose(a.values, d.values, atol=1e-6)


class TestSolver:
    def test_identity_metric_agrees(self, points, rng):
        v1 = rng.uniform(0.5, 3, size=points.shape[0])
        a = opt.maximize_design(_problem(points, 1.0, v1, budget=prop.Budget.exact(0.3)))
        b = opt.maximize_design(_problem(points, 1.0, v1, budget=prop.Budget.exact(0.3)), metric="identity")
        assert b.diagnostics.objective == pytest.approx(a.diagnostics.objective, abs=1e-9)

    def test_monotone_family_is_monotone(self, points):
        v1 = np.exp(points[:, 0])
        res = opt.maximize_design(_problem(points, 1.0, v1, kind="monotone", budget=prop.Budget.exact(0.4)))
        assert np.all(np.diff(res.values) >= -1e-10)
        assert res.values.mean() == pytest.approx(0.4, abs=1e-9)

    @pytest.mark.parametrize("kind", ["parametric-simplex", "expit-hull"])
    def test_hull_families(self, rng, kind):
        pts = rng.normal(size=(80, 2))
        v1 = np.exp(pts.sum(axis=1) / 2)
        problem = opt.DesignProblem(pts, 1.0, v1, prop.Family(kind), prop.Budget(0.15, 0.15))
        res = opt.maximize_design(problem, keep_trace=True)
        assert problem.feasible_set.contains(res.variables)
        assert res.values.mean() == pytest.approx(0.15, abs=1e-7)
        assert res.diagnostics.trace[-1] >= res.diagnostics.trace[0]
        np.testing.assert_allclose(res.function.evaluate(pts), res.values, atol=1e-10)

    def test_infeasible(self, points):
        with pytest.raises(DesignInfeasibleError):
            problem = opt.DesignProblem(points, 1.0, 1.0, prop.Family("expit-hull"), prop.Budget(0.999, 1.0))
            opt.maximize_design(problem)

    def test_bad_objective(self, points):
        with pytest.raises(ConfigError):
            _problem(points, objective="MSE")

    def test_values_outside_unit_interval(self, points):
        with pytest.raises(NumericalError):
            opt.objective_and_gradient(np.full(points.shape[0], 1.5), _problem(points))

    def test_function_reproduces_values(self, points, rng):
        v1 = rng.uniform(0.5, 3, size=points.shape[0])
        res = opt.maximize_design(_problem(points, 1.0, v1, budget=prop.Budget.exact(0.25)))
        np.testing.assert_allclose(res.function.evaluate(points), res.values, atol=1e-12)


class TestBruteForce:
    def test_matches_solver_on_tiny_problem(self):
        pts = np.array([[0.0], [0.3], [1.0]])
        problem = _problem(pts, np.array([1.0, 2.0, 0.5]), np.array([3.0, 1.0, 2.0]),
                           budget=prop.Budget(0.3, 0.5))
        grid = opt.brute_force_design(problem)
        res = opt.maximize_design(problem)
        f_grid, _ = opt.objective_and_gradient(grid, problem)
        assert f_grid <= res.diagnostics.objective + 1e-12

    def test_size_limit(self, points):
        with pytest.raises(ConfigError):
            opt.brute_force_design(_problem(points))
