"""Exception types shared across the package."""


class DroploopError(Exception):
    """Base class for all package errors."""


class BoundsError(DroploopError, ValueError):
    """A parameter-space box or a point violates its bounds."""


class WeightError(DroploopError, ValueError):
    """Loss-component weights do not form a valid convex combination."""


class ConfigError(DroploopError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class SynthesisTimeoutError(DroploopError, TimeoutError):
    """No response image arrived within the allotted wait."""


class ImageFormatError(DroploopError, ValueError):
    """An image file could not be decoded into a grayscale raster."""


class ConditioningError(DroploopError, RuntimeError):
    """Kernel matrix could not be factorized even after jitter escalation."""


class DivergenceError(DroploopError, RuntimeError):
    """Gradient descent diverged; the learning rate is too large."""


class MissingStateError(DroploopError, RuntimeError):
    """A required archived artifact (model, run record) is absent."""
