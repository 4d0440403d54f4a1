"""Exception types shared across the package."""


class SeenetError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(SeenetError):
    """An input violated an operation's contract (shape, range, or value)."""


class ConfigError(SeenetError):
    """A hyperparameter or configuration value is out of its legal range."""


class DataIOError(SeenetError):
    """A file could not be read or written; the message names the path."""


class UndefinedMetricError(SeenetError):
    """A metric has no defined value for the given inputs."""


class GradCheckError(SeenetError):
    """The gradient checker hit a non-finite function value."""


class TrainingDiverged(SeenetError):
    """Training aborted on a non-finite loss."""
