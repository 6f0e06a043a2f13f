"""Exception types shared across the package."""


class RplError(Exception):
    """Base class for all package errors."""


class ConfigError(RplError, ValueError):
    """Invalid configuration values or inconsistent channel plans."""


class InputError(RplError, ValueError):
    """Array or tensor shapes do not match what an operation expects."""


class PlacementError(RplError, ValueError):
    """A scaled outlier object does not fit inside the inlier image."""


class NumericError(RplError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(RplError, RuntimeError):
    """Training diverged (NaN/inf loss)."""


class InvariantViolation(RplError, RuntimeError):
    """A frozen-model invariant was broken, e.g. checksum drift."""


class UndefinedMetricError(RplError, ValueError):
    """A metric is undefined for the given input (e.g. single-class labels)."""
