"""Exception types raised across the package."""


class ShearSplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ShearSplatError, ValueError):
    """A numeric argument is outside its valid domain (zero quaternion, non-positive scale, ...)."""


class DegenerateTemporalError(ShearSplatError, ValueError):
    """The temporal variance of a 4D covariance is too small to condition on."""


class ConfigurationError(ShearSplatError, ValueError):
    """Shape mismatch, invalid config value, or malformed scene/config file."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class CheckpointError(ShearSplatError):
    """A checkpoint file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(ShearSplatError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None, checkpoint_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
