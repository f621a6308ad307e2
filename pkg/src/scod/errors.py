"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family onto an exit code: configuration problems exit
with 2, malformed data with 3, numeric failures with 4.
"""


class ScodError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ScodError, ValueError):
    """Invalid configuration: costs, priors, grids, config files."""


class InvalidCostError(ConfigError):
    pass


class DataError(ScodError, ValueError):
    """Malformed inputs: NaN features, bad labels, schema violations."""


class NumericError(ScodError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class RankDeficiencyError(NumericError):
    def __init__(self, requested, achieved):
        self.requested = requested
        self.achieved = achieved
        super().__init__(
            f"embedding covariance has rank {achieved}, below the requested "
            f"subspace dimension {requested}"
        )
