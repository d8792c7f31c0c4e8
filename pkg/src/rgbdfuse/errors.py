"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range or names an unknown variant."""


class DataError(ValueError):
    """Input data (images, manifests, labels) is missing or malformed."""


class UsageError(ValueError):
    """An operation was called in a state or mode it does not support."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, versioned wrong, or inconsistent with its config."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numerical condition."""
