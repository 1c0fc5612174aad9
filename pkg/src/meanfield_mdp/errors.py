"""Exception and warning types raised across the package."""


class MeanFieldError(Exception):
    """Base class for errors raised by this package."""


class SpaceMismatch(MeanFieldError, ValueError):
    pass


class InvalidMeasure(MeanFieldError, ValueError):
    pass


class UnreachableTargetPoint(MeanFieldError, ValueError):
    """The pushed-forward measure puts no mass on some target point, so the
    adjoint row there is undefined."""

    def __init__(self, points):
        self.points = list(points)
        super().__init__(f"target points with zero mass under mu M: {self.points}")


class ZeroMass(MeanFieldError, ValueError):
    pass


class PotentialOutOfRange(MeanFieldError, ValueError):
    def __init__(self, time, message):
        self.time = time
        super().__init__(f"time {time}: {message}")


class TimeOrder(MeanFieldError, ValueError):
    pass


class TimeOutOfRange(MeanFieldError, IndexError):
    pass


class ExactFlowUnavailable(MeanFieldError):
    """Raised when an operation needs exact finite-state arithmetic but the
    model can only be sampled."""


class DegenerateBatch(MeanFieldError, ValueError):
    pass


class ModelValidationError(MeanFieldError, ValueError):
    def __init__(self, message, time=None):
        self.time = time
        prefix = f"time {time}: " if time is not None else ""
        super().__init__(prefix + message)


class ConfigError(MeanFieldError, ValueError):
    def __init__(self, key, value, message):
        self.key = key
        self.value = value
        super().__init__(f"{key}={value!r}: {message}")


class DomainTooLarge(UserWarning):
    """b(m) requested beyond the range where factorials fit in a double;
    the log-space value is still returned."""


class ConvergenceNotReached(UserWarning):
    pass
