"""Exception hierarchy.

Every error raised by the library derives from :class:`DiCacheError`. The three
intermediate classes map onto the CLI exit codes (config = 2, numeric = 3,
I/O = 4).
"""


class DiCacheError(Exception):
    exit_code = 1

    # filled in by the sampler when an error escapes a provider
    step_index = None


class ConfigError(DiCacheError, ValueError):
    exit_code = 2


class NumericError(DiCacheError, ArithmeticError):
    exit_code = 3


class IoFailure(DiCacheError, OSError):
    exit_code = 4


# config / precondition failures
class InvalidConfig(ConfigError):
    pass


class InvalidRange(ConfigError):
    pass


class InvalidFraction(ConfigError):
    pass


class InvalidInterval(ConfigError):
    pass


class BadProbeDepth(ConfigError):
    pass


class BadGrid(ConfigError):
    pass


class InvalidLayers(ConfigError):
    pass


class LayerNotRecorded(ConfigError):
    pass


class BadSchedule(ConfigError):
    pass


class OutOfRangeTime(ConfigError):
    pass


# numeric failures
class ShapeMismatch(NumericError):
    pass


class LengthMismatch(NumericError):
    pass


class ZeroReferenceNorm(NumericError):
    pass


class DegenerateSequence(NumericError):
    pass


class DegenerateReference(NumericError):
    pass


class NonFiniteValue(NumericError):
    pass
