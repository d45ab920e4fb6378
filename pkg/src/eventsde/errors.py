"""Exception types raised by the solver, sensitivity and training code."""


class EventSDEError(Exception):
    """Base class for all package errors."""


class NumericalError(EventSDEError, ArithmeticError):
    """Non-finite state or vector-field output during integration."""

    def __init__(self, message, t=None, y=None):
        super().__init__(message)
        self.t = t
        self.y = y


class BracketError(EventSDEError, ValueError):
    """The event function does not change sign across the search interval."""


class ConvergenceError(EventSDEError, RuntimeError):
    """Root finding exhausted its iteration budget."""


class ModelError(EventSDEError, ValueError):
    """The model violates a structural requirement (e.g. a transition lands in an event kernel)."""


class StepSizeError(EventSDEError, RuntimeError):
    """Too many events packed into one solver step; a smaller dt is required."""


class TransversalityError(EventSDEError, ArithmeticError):
    """The drift is (numerically) tangent to the event surface, so the event time is not differentiable."""


class NonDifferentiableError(EventSDEError, RuntimeError):
    """A finite-difference perturbation changed the event structure of the solution."""


class OptimizerError(EventSDEError, ArithmeticError):
    """Non-finite gradient handed to the optimizer."""


class TrainingError(EventSDEError, RuntimeError):
    """Simulation failure during training, carrying the offending seed."""

    def __init__(self, message, seed=None):
        super().__init__(message)
        self.seed = seed


class CapacityError(EventSDEError, MemoryError):
    """A truncated tensor would exceed the configured memory budget."""


class ConfigError(EventSDEError, ValueError):
    """Malformed or unknown configuration entries."""


class ApproximationWarning(UserWarning):
    """Emitted when a computation falls back to an approximate (non-exact) mode."""


class AssumptionWarning(UserWarning):
    """Emitted when a model fails one of the differentiability conditions at an event."""
