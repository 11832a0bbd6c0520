"""Exception types shared across the package."""


class PseudoclusterError(Exception):
    """Base class for all errors raised by this package."""


class DataError(PseudoclusterError):
    """Invalid data values (non-positive weights, non-finite numbers, ...)."""


class StructuralError(PseudoclusterError):
    """Broken hierarchy structure: dangling ids, duplicate units, bad nesting."""


class IngestionError(PseudoclusterError):
    """A CSV file violates the expected schema.  Messages name row and column."""


class ModelError(PseudoclusterError):
    """The requested model cannot be formed (unknown columns, rank deficiency)."""


class IdentifiabilityError(ModelError):
    """Variance components cannot be separated for this data layout."""


class NumericError(PseudoclusterError):
    """A numerical evaluation produced a non-finite intermediate."""


class EstimationError(PseudoclusterError):
    """Estimation-level failures (e.g. too few clusters for a variance)."""
