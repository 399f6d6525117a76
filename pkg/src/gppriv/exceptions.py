class GPPrivError(Exception):
    """Base class for errors raised by gppriv."""


class InputError(GPPrivError, ValueError):
    """Invalid arguments or malformed data."""


class NumericalError(GPPrivError, ArithmeticError):
    """A factorization or update could not be carried out stably."""


class NotConvergedError(GPPrivError):
    """Raised when a converged EP state is required but not available."""


class FitError(GPPrivError):
    """Every hyperparameter evaluation failed during model fitting."""
