"""Exception hierarchy shared across the package."""


class IndAlphaError(Exception):
    """Base class for all errors raised by indalpha."""


class DataError(IndAlphaError, ValueError):
    """Invalid input data or model specification."""


class SingularMatrixError(IndAlphaError):
    """A normal (or bread) matrix could not be inverted.

    ``columns`` lists the design columns implicated by the null space,
    when they can be identified.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SaturationError(IndAlphaError):
    """The alpha link was pushed to the boundary of its range (|eta| -> 1)."""


class SeparationError(IndAlphaError):
    """The logistic missingness model shows (quasi-)complete separation."""
