"""Exception types shared across the toolkit.

All three map to CLI exit code 2 (data / contract errors); usage errors
are handled by the argument parser and exit with 1.
"""


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class ConfigError(ValueError):
    """A configuration value is invalid (bad probability mix, bad ratio, ...)."""


class DataFormatError(ValueError):
    """A file on disk does not conform to its documented schema."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the offending batch."""

    def __init__(self, message, image_id=None, step=None):
        super().__init__(message)
        self.image_id = image_id
        self.step = step
