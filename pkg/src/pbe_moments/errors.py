"""Exception types shared across the solver modules."""


class PBEError(Exception):
    """Base class for all solver errors."""


class DomainError(PBEError, ValueError):
    """A volume argument lies outside the admissible interval."""


class RealizabilityError(PBEError):
    """A moment vector cannot be represented by a nonnegative measure.

    ``order`` is the recursion order at which the violation was detected
    (for the Wheeler inversion this is the index of the failing pivot).
    """

    def __init__(self, message, order=None, cell=None):
        super().__init__(message)
        self.order = order
        self.cell = cell


class OptimizationError(PBEError):
    """The maximum-entropy dual problem did not converge for any regularization."""

    def __init__(self, message, gradient_norm=float("nan"), cell=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.cell = cell


class TimeStepError(PBEError):
    """The requested time step violates a positivity or CFL restriction."""
