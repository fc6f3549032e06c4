class MadformerError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(MadformerError):
    pass


class NonDivisibleGrid(MadformerError):
    pass


class ShapeMismatch(MadformerError):
    pass


class InvalidRange(MadformerError):
    pass


class TimestepOutOfRange(MadformerError):
    pass


class TimestepOrder(MadformerError):
    pass


class InvalidCount(MadformerError):
    pass


class EmptySupervision(MadformerError):
    pass


class NonFiniteGradient(MadformerError):
    pass


class NonFiniteLoss(MadformerError):
    pass


class CacheInvalidation(MadformerError):
    pass


class DimensionMismatch(MadformerError):
    pass


class NonConvergedSqrt(MadformerError):
    pass


class CheckpointError(MadformerError):
    pass


class NotFoundError(MadformerError):
    pass
