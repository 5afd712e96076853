"""Exception hierarchy shared by all modules.

Configuration problems and numerical failures are kept apart so the CLI can
map them to distinct exit codes.
"""


class BatchpoolError(Exception):
    """Base class for all package errors."""


class ConfigError(BatchpoolError, ValueError):
    """Invalid user configuration or inconsistent inputs."""


class DimensionMismatchError(ConfigError):
    """Array shapes do not agree with the declared covariate dimension."""


class NumericalError(BatchpoolError, ArithmeticError):
    """A computation could not be completed reliably."""


class DesignInfeasibleError(NumericalError):
    """The budget set intersected with the function family is empty."""


class SingularInformationError(NumericalError):
    """An information matrix is singular where an inverse or gradient is needed."""


class EstimationError(NumericalError):
    """The averaged score derivative is singular or badly conditioned.

    Parameters
    ----------
    message : str
        Human-readable description.
    condition_number : float, optional
        Condition number of the matrix that failed the check.
    """

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ArmEmptyError(NumericalError):
    """Too few observations in a treatment arm to fit a nuisance function."""
