"""Exception hierarchy.

Every error raised on purpose by the package derives from ``PseudographError``.
``NumericalError`` marks failures of an integrator, solver or optimizer; the
CLI maps it to exit code 3.
"""


class PseudographError(Exception):
    pass


class ConfigInvalid(PseudographError, ValueError):
    pass


class NumericalError(PseudographError):
    pass


class NonConvexHamiltonian(NumericalError):
    pass


class FlowDivergence(NumericalError):
    pass


class LegendreNoConvergence(NumericalError):
    pass


class EnergyDriftExceeded(NumericalError):
    pass


class StepFailure(NumericalError):
    pass


class ActionNoConvergence(NumericalError):
    pass


class TimeTooLarge(PseudographError):
    pass


class GridTooCoarse(PseudographError):
    pass


class LoopNotClosed(PseudographError):
    pass


class NotAGraph(PseudographError):
    pass


class GridMismatch(PseudographError):
    pass


class NoBreakdownInRange(PseudographError):
    """No fold was found below ``t_hi``; ``result`` holds the lower bound."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
