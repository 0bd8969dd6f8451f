"""Exception hierarchy shared across the package."""


class HcaNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HcaNetError, ValueError):
    """A config object or hyperparameter violates its constraints."""


class InputError(HcaNetError, ValueError):
    """Runtime input (shapes, coordinates, batch contents) is out of domain."""


class NumericError(InputError):
    """Input contains NaN or Inf where finite values are required."""


class IngestionError(HcaNetError, RuntimeError):
    """A data file on disk is missing, truncated, or malformed."""


class CheckpointError(HcaNetError, RuntimeError):
    """A checkpoint is unreadable or carries an incompatible format version."""


class TrainingDivergedError(HcaNetError, RuntimeError):
    """The training loss became non-finite."""
