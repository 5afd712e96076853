"""Simulation configuration: a validated model loaded from YAML.

Example file::

    dgp:
      dim: 1
      var_kind: heteroskedastic
    estimand: ATE
    nuisance: estimated
    replications: 300
    methods: [flexible/pooled, rct/pooled, rct/aggregated]
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from batchpool import dgp as dgp_mod
from batchpool import propensity as prop
from batchpool.errors import ConfigError

DESIGNS = ("rct", "flexible", "flexible-batch", "binned", "binned-k1")
ESTIMATORS = ("pooled", "aggregated", "binned")
BASELINE = "rct/aggregated"
DEFAULT_METHODS = {
    "ATE": ["flexible/pooled", "binned/pooled", "rct/pooled", "flexible-batch/aggregated",
            "binned-k1/binned", BASELINE],
    "PL": ["flexible/pooled", "binned/pooled", "rct/pooled", "flexible-batch/aggregated", BASELINE],
}


class DGPConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(1, ge=1)
    covariate_law: Literal["standard-gaussian", "uniform-unit-interval",
                           "density-2x-on-unit-interval"] = "standard-gaussian"
    mean_kind: Literal["linear", "zero"] = "linear"
    var_kind: Literal["homoskedastic", "heteroskedastic", "custom-table"] = "homoskedastic"
    effect: list[float] = Field(default_factory=list)
    table: Optional[dict] = None

    def to_spec(self) -> dgp_mod.DGPSpec:
        return dgp_mod.DGPSpec.from_dict(self.model_dump())


class FamilyConfig(BaseModel):
    """Flexible-design family; ``auto`` picks Lipschitz(1) for one covariate, expit-hull otherwise."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["auto", "constant", "monotone", "lipschitz", "binned",
                  "parametric-simplex", "expit-hull"] = "auto"
    lipschitz: float = Field(1.0, gt=0)
    bins: int = Field(4, ge=1)
    degree: int = Field(4, ge=0)
    transform: Literal["probit", "identity"] = "probit"


class SimConfig(BaseModel):
    """Monte Carlo study configuration."""

    model_config = ConfigDict(extra="forbid")

    dgp: DGPConfig = Field(default_factory=DGPConfig)
    batch_sizes: list[int] = Field(default_factory=lambda: [1000, 1000])
    budgets: list[tuple[float, float]] = Field(default_factory=lambda: [(0.2, 0.2), (0.2, 0.2)])
    initial: float = Field(0.2, gt=0, lt=1)
    n_folds: int = Field(2, ge=2)
    family: FamilyConfig = Field(default_factory=FamilyConfig)
    bins: int = Field(4, ge=1)
    psi_kind: Literal["A-opt", "D-opt"] = "A-opt"
    estimand: Literal["ATE", "PL"] = "ATE"
    nuisance: Literal["estimated", "oracle"] = "estimated"
    smoother: Literal["auto", "local-linear", "knn", "ridge-spline"] = "auto"
    clip_gamma: Optional[float] = Field(None, ge=0, lt=0.5)
    methods: Optional[list[str]] = None
    baseline: str = BASELINE
    replications: int = Field(300, ge=1)
    bootstrap: int = Field(2000, ge=100)
    level: float = Field(0.90, gt=0, lt=1)
    master_seed: int = 20240917
    workers: int = Field(1, ge=1)
    known_future: bool = False
    max_failure_rate: float = Field(0.01, ge=0, le=1)
    variance_sample_size: int = Field(100_000, ge=1000)
    variance_seed: int = 20240917
    output_dir: Optional[str] = None
    formats: list[Literal["csv", "json", "markdown"]] = Field(
        default_factory=lambda: ["csv", "json", "markdown"])

    @field_validator("budgets")
    @classmethod
    def _check_budgets(cls, value):
        for low, high in value:
            prop.Budget(low, high)
        return value

    @field_validator("batch_sizes")
    @classmethod
    def _check_sizes(cls, value):
        if not value or any(n < 1 for n in value):
            raise ValueError("batch sizes must be positive")
        return value

    @model_validator(mode="after")
    def _check_consistency(self):
        if len(self.budgets) != len(self.batch_sizes):
            raise ValueError("one budget per batch is required")
        for method in self.method_list:
            design, _, estimator = method.partition("/")
            if design not in DESIGNS or estimator not in ESTIMATORS:
                raise ValueError(f"unknown method {method!r}")
            if estimator == "binned" and self.estimand != "ATE":
                raise ValueError("the binned estimator is defined for the ATE only")
        if self.baseline not in self.method_list:
            raise ValueError("the baseline must be one of the methods")
        return self

    @property
    def method_list(self) -> list[str]:
        methods = list(self.methods) if self.methods else list(DEFAULT_METHODS[self.estimand])
        if self.baseline not in methods:
            methods.append(self.baseline)
        return methods

    @property
    def gamma(self) -> float:
        if self.clip_gamma is not None:
            return self.clip_gamma
        return 0.01 if self.estimand == "ATE" else 0.0

    def spec(self) -> dgp_mod.DGPSpec:
        return self.dgp.to_spec()

    def flexible_family(self) -> prop.Family:
        kind = self.family.kind
        if kind == "auto":
            kind = "lipschitz" if self.dgp.dim == 1 else "expit-hull"
        return prop.Family(kind, lipschitz=self.family.lipschitz, clip_gamma=self.gamma,
                           bins=self.family.bins, degree=self.family.degree,
                           transform=self.family.transform)

    def budget_objects(self) -> list:
        return [prop.Budget(lo, hi) for lo, hi in self.budgets]


def load_config(path=None, overrides: dict | None = None) -> SimConfig:
    """Read a YAML config (or defaults) and apply dotted-key overrides.

    Raises
    ------
    ConfigError
        On unreadable files or invalid values.
    """
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
            data = yaml.safe_load(text) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    try:
        return SimConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
