"""Exception and warning types raised across the package."""


class InputError(ValueError):
    """Malformed or out-of-domain input (dimensions, simplex violations, zero shares)."""


class ParameterError(ValueError):
    """A structural parameter lies outside its admissible domain."""


class SolverError(RuntimeError):
    """An iterative solver failed to converge.

    Attributes
    ----------
    residual : float
        The last residual reached before giving up.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0, trace=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.trace = trace


class NumericError(ArithmeticError):
    """Overflow or NaN encountered despite stabilisation."""


class ZeroProbabilitySignalError(InputError):
    """Bayes update conditioned on a signal with zero marginal probability."""


class IdentificationError(InputError):
    """Rank deficiency in a Jacobian or instrument matrix."""


class WeakIdentificationWarning(UserWarning):
    """The GMM objective profile is flat across the search grid."""
