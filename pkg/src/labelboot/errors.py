"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataFormatError and
OracleUnavailableError -> 3, TrainingDivergedError -> 4.
"""


class LabelbootError(Exception):
    """Base class for package errors."""


class ConfigError(LabelbootError):
    """Invalid configuration value or stage sequencing violation."""


class DataFormatError(LabelbootError):
    """Malformed dataset directory, manifest, or noise file."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class OracleUnavailableError(LabelbootError):
    """A ground-truth oracle was requested but the dataset has no true labels."""


class TrainingDivergedError(LabelbootError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
