import math

import numpy as np
import pytest

from batchpool import dgp
from batchpool.errors import ConfigError, DimensionMismatchError
from batchpool.rng import StreamFactory, make_stream


class TestStreams:
    def test_same_key_same_draws(self):
        a = make_stream(7, 3, "batch", 0).random(5)
        b = make_stream(7, 3, "batch", 0).random(5)
        np.testing.assert_array_equal(a, b)

    def test_purposes_are_independent(self):
        streams = StreamFactory(7, 3)
        assert not np.allclose(streams("batch", 0).random(5), streams("uniforms", 0).random(5))

    def test_replications_differ(self):
        assert StreamFactory(7, 0)("x").random() != StreamFactory(7, 1)("x").random()

    def test_negative_keys_rejected(self):
        with pytest.raises(ValueError):
            make_stream(1, -2)


class TestSpec:
    def test_rejects_bad_effect_length(self):
        with pytest.raises(ConfigError):
            dgp.DGPSpec(dim=2, effect=(1.0, 2.0))

    def test_round_trip(self):
        spec = dgp.DGPSpec(dim=2, var_kind="heteroskedastic", effect=(1.0, 0.5, -0.5))
        assert dgp.DGPSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_law(self):
        with pytest.raises(ConfigError):
            dgp.DGPSpec(covariate_law="cauchy")


class TestNuisanceFunctions:
    def test_linear_mean_and_effect(self):
        spec = dgp.DGPSpec(dim=2, effect=(1.0, 2.0, 0.0))
        x = np.array([[0.5, -1.0]])
        assert dgp.mean_fn(spec, 0, x)[0] == pytest.approx(-0.5)
        assert dgp.mean_fn(spec, 1, x)[0] == pytest.approx(-0.5 + 1.0 + 1.0)

    def test_scalar_point_returns_float(self, heteroskedastic):
        out = dgp.var_fn(heteroskedastic, 1, 0.4)
        assert isinstance(out, float)
        assert out == pytest.approx(2 * math.exp(0.2))

    def test_dimension_mismatch(self):
        spec = dgp.DGPSpec(dim=3)
        with pytest.raises(DimensionMismatchError):
            dgp.mean_fn(spec, 0, np.zeros((4, 2)))

    def test_bad_arm(self, homoskedastic):
        with pytest.raises(ConfigError):
            dgp.mean_fn(homoskedastic, 2, 0.0)


class TestTruth:
    def test_gaussian_ate_is_intercept(self):
        spec = dgp.DGPSpec(dim=2, effect=(0.3, 1.0, 1.0))
        assert dgp.true_theta(spec, "ATE")[0] == pytest.approx(0.3)

    def test_uniform_ate_includes_slope_mean(self):
        spec = dgp.DGPSpec(dim=1, covariate_law="uniform-unit-interval", effect=(0.0, 2.0))
        assert dgp.true_theta(spec, "ATE")[0] == pytest.approx(1.0)

    def test_sample_moments(self, heteroskedastic):
        table = dgp.sample_batch(heteroskedastic, 200_000, make_stream(1, "moments"))
        # arm 1 residual variance has mean 2 exp(1/8) under the standard Gaussian law
        resid = table.y1 - dgp.mean_fn(heteroskedastic, 1, table.x)
        assert resid.var() == pytest.approx(2 * math.exp(0.125), rel=0.02)
