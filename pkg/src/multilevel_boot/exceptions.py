class MultilevelError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(MultilevelError, ValueError):
    """Input data or configuration violates a structural requirement."""


class NumericalError(MultilevelError, ArithmeticError):
    """A numerical step (factorization, fit, reflation) could not be completed."""


class SingularDesignError(NumericalError):
    """The fixed-effects normal matrix is singular or rank deficient."""


class LeverageError(NumericalError):
    """A leverage value is too close to one for an HCCME transform."""


class RefitFailureError(NumericalError):
    """Too many bootstrap refits failed to converge.

    The replicates collected before giving up are kept on ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
