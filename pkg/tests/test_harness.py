import json

import numpy as np
import pytest

from batchpool import harness
from batchpool.config import load_config
from batchpool.errors import ConfigError, NumericalError


@pytest.fixture(scope="module")
def small_config():
    return load_config(None, {"replications": 3, "bootstrap": 200, "batch_sizes": [300, 300],
                              "methods": ["flexible/pooled", "binned-k1/binned", "rct/aggregated"]})


@pytest.fixture(scope="module")
def small_table(small_config):
    return harness.run_monte_carlo(small_config)


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.method_list[-1] == "rct/aggregated"
        assert cfg.flexible_family().kind == "lipschitz"
        assert cfg.gamma == 0.01

    def test_high_dimension_uses_hull(self):
        assert load_config(None, {"dgp.dim": 10}).flexible_family().kind == "expit-hull"

    def test_yaml_and_override(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("estimand: PL\nreplications: 10\n")
        cfg = load_config(path, {"replications": 4})
        assert cfg.estimand == "PL" and cfg.replications == 4 and cfg.gamma == 0.0

    @pytest.mark.parametrize("overrides", [
        {"methods": ["flexible/magic"]},
        {"estimand": "PL", "methods": ["binned-k1/binned"]},
        {"budgets": [[0.5, 0.2], [0.2, 0.2]]},
        {"batch_sizes": [100]},
        {"unknown_key": 1},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            load_config(None, overrides)


class TestBootstrap:
    def test_baseline_is_point(self):
        out = harness.bootstrap_ci({"a": np.ones(5), "b": np.arange(1.0, 6.0)}, "a", B=200)
        assert out["a"] == (1.0, 1.0, 1.0)

    def test_interval_brackets_ratio(self, rng):
        base = rng.exponential(2.0, 300)
        better = rng.exponential(1.0, 300)
        ratio, lo, hi = harness.bootstrap_ci({"base": base, "m": better}, "base", B=500, rng=rng)["m"]
        assert lo < ratio < hi
        assert ratio == pytest.approx(base.mean() / better.mean())

    def test_unpaired_rejected(self):
        with pytest.raises(ConfigError):
            harness.bootstrap_ci({"a": np.ones(3), "b": np.ones(4)}, "a")

    def test_weighted_edges(self):
        edges = harness.weighted_quantile_edges(np.arange(8.0), np.ones(8) / 8, 4)
        np.testing.assert_allclose(edges, [1.0, 3.0, 5.0])


class TestStudy:
    def test_rows(self, small_table, small_config):
        assert [r.method for r in small_table.rows] == small_config.method_list
        base = small_table.row("rct/aggregated")
        assert base.rel_eff == 1.0 and base.asymp_rel_eff == pytest.approx(1.0)
        assert all(r.n_fail == 0 for r in small_table.rows)

    def test_deterministic(self, small_table, small_config):
        again = harness.run_monte_carlo(small_config)
        for fmt in ("csv", "json", "markdown"):
            assert harness.emit_report(again, fmt) == harness.emit_report(small_table, fmt)

    def test_workers_do_not_change_results(self, small_table, small_config):
        parallel = harness.run_monte_carlo(small_config.model_copy(update={"workers": 2}))
        assert harness.emit_report(parallel, "csv") == harness.emit_report(small_table, "csv")

    def test_reports(self, small_table, tmp_path):
        csv_text = harness.emit_report(small_table, "csv", tmp_path / "r.csv")
        assert csv_text.splitlines()[0].split(",") == list(harness.REPORT_COLUMNS)
        data = json.loads(harness.emit_report(small_table, "json"))
        assert data["metadata"]["replications_used"] == 3
        assert "Binned (single fold)" in harness.emit_report(small_table, "markdown")
        with pytest.raises(ConfigError):
            harness.emit_report(small_table, "xlsx")

    def test_failures_abort(self, small_config, monkeypatch):
        real = harness.estimate

        def flaky(record, estimator, cfg):
            if estimator == "binned":
                raise NumericalError("forced")
            return real(record, estimator, cfg)

        monkeypatch.setattr(harness, "estimate", flaky)
        with pytest.raises(NumericalError, match="binned-k1/binned failed in 3 of 3"):
            harness.run_monte_carlo(small_config)
