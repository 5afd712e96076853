"""Pooled estimation and propensity design for batch adaptive experiments."""

from batchpool.errors import (
    ArmEmptyError,
    BatchpoolError,
    ConfigError,
    DesignInfeasibleError,
    DimensionMismatchError,
    EstimationError,
    NumericalError,
    SingularInformationError,
)

__version__ = "0.1.0"

__all__ = [
    "ArmEmptyError",
    "BatchpoolError",
    "ConfigError",
    "DesignInfeasibleError",
    "DimensionMismatchError",
    "EstimationError",
    "NumericalError",
    "SingularInformationError",
    "__version__",
]
