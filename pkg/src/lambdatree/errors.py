"""Exception hierarchy shared by all modules."""


class LambdaTreeError(Exception):
    """Base class for every error raised by this package."""


class MeasureError(LambdaTreeError, ValueError):
    pass


class MeasureParseError(MeasureError):
    """Measure specification string is malformed."""


class MeasureValidationError(MeasureError):
    """Measure specification parses but violates a measure invariant."""


class NumericalError(LambdaTreeError, ArithmeticError):
    pass


class QuadratureError(NumericalError):
    """Adaptive quadrature did not reach the requested tolerance."""


class DivergentIntegralError(QuadratureError):
    """The integrand is not integrable against the measure."""


class SimulationError(LambdaTreeError):
    pass


class CensoredDistanceError(LambdaTreeError, ValueError):
    """A complete metric was required but some distances are censored."""


class SearchBudgetExceeded(NumericalError):
    """Exact search for a separated set ran out of nodes.

    ``lower`` and ``upper`` are certified bounds on the exact answer.
    """

    def __init__(self, lower, upper, message=None):
        self.lower = lower
        self.upper = upper
        super().__init__(
            message or f"search budget exceeded; value lies in [{lower}, {upper}]"
        )
