"""Exception hierarchy shared by all modules."""


class LevyBSDEError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(LevyBSDEError, ValueError):
    """Invalid model, grid, generator or config input."""


class DomainError(LevyBSDEError, ValueError):
    """Argument outside the domain of an operation."""


class NumericalError(LevyBSDEError, RuntimeError):
    """A numerical procedure failed (fixed point, factorization, ...)."""


class StabilityError(NumericalError):
    """Explicit part of a time-stepping scheme violates its stability bound."""

    def __init__(self, message, required_dt=None):
        super().__init__(message)
        self.required_dt = required_dt
