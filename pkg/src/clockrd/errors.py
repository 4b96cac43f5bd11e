"""Exception hierarchy shared across the package."""


class ClockRdError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ClockRdError):
    """Input data does not match the declared schema (missing columns etc.)."""


class DataError(ClockRdError):
    """Input rows are structurally valid but unusable for the requested analysis."""


class EstimabilityError(ClockRdError):
    """Design matrix cannot support the requested fit (rank, dimensions)."""


class EstimationError(ClockRdError):
    """Numerical estimation failed (singular covariance, no convergence)."""
