"""Exception types shared across the toolkit.

The CLI maps these onto exit codes (usage=1, config=2, data=3, numeric=4),
so library code should raise the most specific class that applies.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ToolkitError):
    """Shape or contract mismatch between tensors / operations."""


class NumericError(ToolkitError):
    """Non-finite values or other numerical failure states."""


class TrainingError(NumericError):
    """Training diverged.  Carries the step at which it happened."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class FormatError(ToolkitError):
    """Malformed or unsupported on-disk artifact."""


class ConfigError(ToolkitError):
    """Invalid configuration value or unknown config key."""


class DataError(ToolkitError):
    """Dataset violates a precondition (empty, label mismatch, ...)."""


class SelectionError(ToolkitError):
    """Feature-selection request cannot be satisfied."""
