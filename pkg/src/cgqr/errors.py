"""Exception types shared across the package."""


class CGQRError(Exception):
    """Base class for all package errors."""


class ConfigError(CGQRError, ValueError):
    """Invalid configuration value."""


class ShapeError(CGQRError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class PreconditionError(CGQRError, ValueError):
    """Input violates a documented precondition."""


class TrainingDivergedError(CGQRError, RuntimeError):
    """Loss became non-finite during training."""
