"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value violates an invariant (divisibility, bounds, ...)."""


class DataError(ValueError):
    """A dataset file, manifest entry, or label mask is invalid."""


class UsageError(ValueError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class TrainingError(RuntimeError):
    """Training cannot proceed (missing gradient, non-finite loss, ...)."""
