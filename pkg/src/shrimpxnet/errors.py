"""Exception types shared across the package.

The CLI maps the ``ValueError`` family below to exit code 2 and
``FloatingPointError`` (including :class:`TrainingDivergedError`) to exit code 3.
"""


class DataError(ValueError):
    """Unreadable, empty or malformed input data."""


class ConfigError(ValueError):
    """Bad configuration file or flag value."""


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


class TrainingDivergedError(FloatingPointError):
    """A non-finite loss or activation appeared during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
