"""Exception hierarchy shared by every module."""


class GMLError(Exception):
    """Base class for all errors raised by gmlimits."""


class NotStochastic(GMLError, ValueError):
    pass


class NotMixing(GMLError, ValueError):
    pass


class NotSummable(GMLError, ValueError):
    pass


class TolTooTight(GMLError, ValueError):
    pass


class TrajectoryTooShort(GMLError, ValueError):
    pass


class NotInD(GMLError):
    """The distribution does not belong to a domain of attraction.

    ``report`` holds the diagnostics that led to the rejection.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class Degenerate(GMLError):
    pass


class P1NonIntegrable(GMLError):
    pass


class QuadratureFail(GMLError, ArithmeticError):
    pass


class ObservableNotRepresentable(GMLError, TypeError):
    pass


class GapCollapse(GMLError, ArithmeticError):
    pass


class SlowMixing(GMLError, ArithmeticError):
    pass


class StepTooLarge(GMLError, ArithmeticError):
    pass


class FitUnstable(GMLError, ArithmeticError):
    pass


class SigmaZero(GMLError, ValueError):
    pass


class ConfigError(GMLError, ValueError):
    pass
