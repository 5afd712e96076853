import numpy as np
import pytest

from batchpool import dgp, scores
from batchpool.errors import EstimationError, NumericalError
from batchpool.rng import make_stream


class TestAIPW:
    def test_single_treated_unit(self):
        obs = scores.Observation(x=np.array([0.0]), z=1, y=3.0)
        parts = scores.aipw_parts(obs, (1.0, 2.0), 0.25)
        # m1 - m0 + (y - m1) / e = 1 + 4
        assert parts.score(np.array([5.0]))[0] == pytest.approx(0.0)
        assert parts.s_a[0, 0] == -1.0

    def test_single_control_unit(self):
        obs = scores.Observation(x=np.array([0.0]), z=0, y=0.0)
        parts = scores.aipw_parts(obs, (lambda x: 1.0, lambda x: 1.5), 0.5)
        assert parts.s_b[0] == pytest.approx(0.5 + 2.0)

    def test_clipping(self):
        parts = scores.aipw_scores([1], [1.0], [0.0], [0.0], [0.001], clip_gamma=0.1)
        assert parts.s_b[0, 0] == pytest.approx(10.0)

    def test_degenerate_propensity(self):
        with pytest.raises(NumericalError):
            scores.aipw_scores([1], [1.0], [0.0], [0.0], [1.0])

    def test_unbiased_at_truth(self, heteroskedastic):
        rng = make_stream(3, "scores")
        table = dgp.sample_batch(heteroskedastic, 200_000, rng)
        e = np.full(len(table), 0.3)
        z = (rng.random(len(table)) < e).astype(int)
        y = np.where(z == 1, table.y1, table.y0)
        m0 = dgp.mean_fn(heteroskedastic, 0, table.x)
        m1 = dgp.mean_fn(heteroskedastic, 1, table.x)
        parts = scores.aipw_scores(z, y, m0, m1, e)
        s = parts.s_b[:, 0] - heteroskedastic.theta0_ate
        assert abs(s.mean()) < 4 * s.std() / np.sqrt(s.size)


class TestEPL:
    def test_single_unit(self):
        obs = scores.Observation(x=np.array([2.0]), z=1, y=4.0)
        parts = scores.epl_parts(obs, 1.0, (1.0, 3.0), 0.5, np.array([1.0, 2.0]))
        w = 1.0 / (1.0 * 0.5 + 3.0 * 0.5)
        np.testing.assert_allclose(parts.s_a, -w * 0.5 * np.array([[1, 2], [2, 4]]))
        np.testing.assert_allclose(parts.s_b, w * 0.5 * 3.0 * np.array([1, 2]))

    def test_weight_floor(self):
        assert scores.epl_weight(0.0, 0.0, 0.5, floor=1e-3)[()] == pytest.approx(1e3)


class TestSolver:
    def test_solves(self):
        theta = scores.solve_linear_score(-np.eye(2) * 2, np.array([2.0, 4.0]))
        np.testing.assert_allclose(theta, [1.0, 2.0])

    def test_singular(self):
        with pytest.raises(EstimationError) as info:
            scores.solve_linear_score(np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones(2))
        assert info.value.condition_number is not None
