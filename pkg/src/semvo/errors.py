"""Exception types shared across the package."""


class SemvoError(Exception):
    pass


class NonPositiveDepth(SemvoError, ValueError):
    pass


class RowOutOfRange(SemvoError, ValueError):
    pass


class DuplicateFrameId(SemvoError, ValueError):
    pass


class EmptyInput(SemvoError, ValueError):
    pass


class GaugeUnconstrained(SemvoError):
    pass


class NumericalFailure(SemvoError, ArithmeticError):
    pass


class UnknownKeyframe(SemvoError, KeyError):
    pass


class InsufficientPoints(SemvoError, ValueError):
    pass


class DegenerateConfiguration(SemvoError, ValueError):
    pass


class LengthMismatch(SemvoError, ValueError):
    pass


class ConfigError(SemvoError):
    pass


class IoError(SemvoError, OSError):
    pass
