"""
dedetr - Error hierarchy.

Every error is a ValueError so callers that only care about bad input can
catch that; the CLI maps each subclass to its process exit code.
"""


class DedetrError(ValueError):
    """Base class for all errors raised by the package."""
    exit_code = 1


class ConfigError(DedetrError):
    """Invalid configuration value or combination."""
    exit_code = 2


class NumericError(DedetrError):
    """A computation produced NaN or Inf."""
    exit_code = 3


class ShapeError(DedetrError):
    """Incompatible tensor shapes or checkpoint/model shape mismatch."""
    exit_code = 4


class AxisError(ShapeError):
    """Axis argument out of range for the tensor rank."""


class CheckpointError(DedetrError):
    """Unreadable checkpoint: bad magic, unsupported version or truncation."""
    exit_code = 5


class GeometryError(DedetrError):
    """Degenerate or malformed box."""


class AugmentationError(DedetrError):
    """Label augmentation cannot fit the requested repeats into N slots."""


class ContractError(DedetrError):
    """A documented precondition of an operation was violated."""
