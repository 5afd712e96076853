"""Command line interface: ``batchpool simulate|design|variance|replay``.

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from batchpool import csbae, harness
from batchpool import optimizer as opt
from batchpool import propensity as prop
from batchpool import variance as var
from batchpool.config import load_config
from batchpool.errors import ConfigError, NumericalError
from batchpool.rng import StreamFactory

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
REPORT_SUFFIX = {"csv": "csv", "json": "json", "markdown": "md"}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Design and analysis of batch adaptive experiments."""


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML study configuration.")
@click.option("--replications", "-R", type=int, default=None)
@click.option("--seed", type=int, default=None, help="Master seed.")
@click.option("--workers", type=int, default=None)
@click.option("--estimand", type=click.Choice(["ATE", "PL"]), default=None)
@click.option("--nuisance", type=click.Choice(["estimated", "oracle"]), default=None)
@click.option("--dim", type=int, default=None, help="Covariate dimension.")
@click.option("--var-kind", type=click.Choice(["homoskedastic", "heteroskedastic"]), default=None)
@click.option("--bootstrap", "-B", type=int, default=None)
@click.option("--method", "methods", multiple=True, help="design/estimator; repeatable.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.option("--format", "formats", multiple=True, type=click.Choice(list(REPORT_SUFFIX)))
@click.option("--save-records", type=click.Path(file_okay=False), default=None,
              help="Also write the first replication's experiment record for each design.")
def simulate(config_path, replications, seed, workers, estimand, nuisance, dim, var_kind, bootstrap,
             methods, out_dir, formats, save_records):
    """Run a Monte Carlo study and write the efficiency report."""
    overrides = {"replications": replications, "master_seed": seed, "workers": workers,
                 "estimand": estimand, "nuisance": nuisance, "dgp.dim": dim, "dgp.var_kind": var_kind,
                 "bootstrap": bootstrap, "methods": list(methods) or None, "output_dir": out_dir,
                 "formats": list(formats) or None}
    cfg = load_config(config_path, overrides)
    start = time.perf_counter()
    table = harness.run_monte_carlo(cfg)
    elapsed = time.perf_counter() - start
    click.echo(harness.emit_report(table, "markdown"), nl=False)
    if cfg.output_dir:
        target = Path(cfg.output_dir)
        target.mkdir(parents=True, exist_ok=True)
        for fmt in cfg.formats:
            harness.emit_report(table, fmt, target / f"report.{REPORT_SUFFIX[fmt]}")
    if save_records:
        folder = Path(save_records)
        folder.mkdir(parents=True, exist_ok=True)
        streams = StreamFactory(cfg.master_seed, 0)
        for design in dict.fromkeys(harness.split_method(m)[0] for m in cfg.method_list):
            record = csbae.run_experiment(harness.experiment_config(cfg, design), streams)
            record.to_json(folder / f"record-{design}.json")
    click.echo(f"wall time {elapsed:.1f} s", err=True)


def _read_design_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError("design data file is empty")
    cols = rows[0].keys()
    xcols = sorted((c for c in cols if c.startswith("x")), key=lambda c: int(c[1:]))
    missing = {"v0", "v1"} - set(cols)
    if not xcols or missing:
        raise ConfigError(f"design data needs columns x1..xd, v0, v1 (missing {sorted(missing)})")
    try:
        table = {c: np.array([float(r[c]) for r in rows]) for c in cols}
    except ValueError as exc:
        raise ConfigError(f"non-numeric value in design data: {exc}") from exc
    points = np.column_stack([table[c] for c in xcols])
    prior = table.get("prior_mix", np.zeros(len(rows)))
    return points, table["v0"], table["v1"], prior


@cli.command()
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV with columns x1..xd, v0, v1 and optionally prior_mix.")
@click.option("--family", type=click.Choice(list(prop.FAMILY_KINDS)), default="lipschitz")
@click.option("--lipschitz", type=float, default=1.0)
@click.option("--bins", type=int, default=4)
@click.option("--budget", nargs=2, type=float, default=(0.2, 0.2), help="LOW HIGH")
@click.option("--objective", type=click.Choice(list(opt.OBJECTIVES)), default="AIPW")
@click.option("--psi-kind", type=click.Choice(list(opt.PSI_KINDS)), default="A-opt")
@click.option("--current-weight", type=float, default=1.0,
              help="Share of the current batch in the pooled sample.")
@click.option("--clip-gamma", type=float, default=0.0)
@click.option("--output", type=click.Path(dir_okay=False), default=None)
def design(data_path, family, lipschitz, bins, budget, objective, psi_kind, current_weight,
           clip_gamma, output):
    """Solve one design problem and emit the propensity as JSON."""
    points, v0, v1, prior = _read_design_csv(data_path)
    fam = prop.Family(family, lipschitz=lipschitz, bins=bins, clip_gamma=clip_gamma)
    problem = opt.DesignProblem(points, v0, v1, fam, prop.Budget(*budget), objective=objective,
                                psi_kind=psi_kind, prior_mix=prior, current_weight=current_weight)
    result = opt.maximize_design(problem)
    text = _dump({"propensity": result.function.to_dict(), "values": result.values,
                  "diagnostics": result.diagnostics.to_dict()})
    if output:
        Path(output).write_text(text + "\n")
    else:
        click.echo(text)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--propensity", "propensity_paths", multiple=True, type=click.Path(exists=True),
              help="Propensity JSON for each batch in order; defaults to constant budget midpoints.")
@click.option("--counterexample", is_flag=True, help="Evaluate the covariate-shift counterexample.")
def variance(config_path, propensity_paths, counterexample):
    """Evaluate pooled and aggregated asymptotic variances."""
    if counterexample:
        click.echo(_dump(var.covariate_shift_counterexample()))
        return
    cfg = load_config(config_path)
    spec = cfg.spec()
    sample = var.covariate_sample(spec, cfg.variance_sample_size, cfg.variance_seed)
    if propensity_paths:
        if len(propensity_paths) != len(cfg.batch_sizes):
            raise ConfigError("give one propensity file per batch")
        fns = []
        for p in propensity_paths:
            data = json.loads(Path(p).read_text())
            fns.append(prop.propensity_from_dict(data.get("propensity", data)))
    else:
        fns = [prop.ConstantPropensity(b.midpoint, dim=spec.dim) for b in cfg.budget_objects()]
    per_batch_e = [np.asarray(fn.evaluate(sample.points), dtype=float) for fn in fns]
    pooled = harness.asymptotic_variance(cfg, "x/pooled", per_batch_e, sample)
    aggregated = harness.asymptotic_variance(cfg, "x/aggregated", per_batch_e, sample)
    click.echo(_dump({"estimand": cfg.estimand, "pooled": pooled, "aggregated": aggregated}))


@cli.command()
@click.option("--record", "record_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--estimator", type=click.Choice(["pooled", "aggregated", "binned"]), default="pooled")
@click.option("--nuisance", type=click.Choice(["estimated", "oracle"]), default="estimated")
@click.option("--smoother", type=click.Choice(["auto", "local-linear", "knn", "ridge-spline"]),
              default="auto")
@click.option("--clip-gamma", type=float, default=None)
@click.option("--bins", type=int, default=4)
def replay(record_path, estimator, nuisance, smoother, clip_gamma, bins):
    """Recompute estimates from a saved experiment record."""
    record = csbae.ExperimentRecord.from_json(record_path)
    overrides = {"estimand": record.estimand, "nuisance": nuisance, "smoother": smoother,
                 "clip_gamma": clip_gamma, "bins": bins, "dgp": record.dgp.to_dict(),
                 "n_folds": max(record.n_folds, 2)}
    cfg = load_config(None, overrides)
    report = harness.estimate(record, estimator, cfg)
    click.echo(_dump(report.to_dict()))


def main(argv=None) -> int:
    """Entry point mapping package errors to exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
