"""Exception types raised across the package."""


class KRError(Exception):
    """Base class for all package errors."""


class DimensionError(KRError, ValueError):
    pass


class ValidationError(KRError, ValueError):
    pass


class UsageError(KRError, ValueError):
    pass


class ConfigError(KRError, ValueError):
    pass


class PlanningError(KRError, ValueError):
    pass


class FormatError(KRError, ValueError):
    """Corrupt or unrecognised file contents."""


class NonFiniteError(KRError, ArithmeticError):
    """NaN or Inf produced by a forward or backward pass."""


class DivergenceError(KRError, RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
