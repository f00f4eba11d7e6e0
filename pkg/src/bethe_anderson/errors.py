"""Exception and warning classes shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (bad grid, bad density, ...)."""


class DomainError(ValueError):
    """Argument outside the domain where the quantity is defined."""


class ConvergenceError(RuntimeError):
    """A Monte Carlo chain failed its equilibration test."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InconsistencyError(RuntimeError):
    """Estimates violate a structural property beyond their error bars."""


class InvariantViolation(RuntimeError):
    """An internal invariant (Herglotz, resolvent bound) was broken."""


class SizeError(RuntimeError):
    """A requested object exceeds a configured resource cap."""


class SamplingError(RuntimeError):
    """Random graph sampling exhausted its retry budget."""


class HeavyTailWarning(RuntimeWarning):
    """A few replicas dominate a Monte Carlo mean."""


class StatisticsWarning(RuntimeWarning):
    """Too few samples for a meaningful statistic."""


class AccuracyWarning(RuntimeWarning):
    """A quadrature or extrapolation is not resolved to the requested accuracy."""
