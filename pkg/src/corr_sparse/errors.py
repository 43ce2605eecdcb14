"""Exception types shared across the toolkit."""


class CorrSparseError(Exception):
    """Base class for all toolkit errors."""


class SingularSystem(CorrSparseError):
    """A symmetric system was numerically singular beyond the jitter guard."""


class NonPositiveB(CorrSparseError):
    """A correlation-matrix update could not be floored to positive definite."""


class NoActiveRows(CorrSparseError):
    """An update that averages over active rows was called with none left."""


class NoConvergence(CorrSparseError):
    """An iterative solver hit its iteration cap before meeting tolerance.

    Solvers generally do not raise this; they return the best iterate with a
    flag. It exists for callers that want to escalate the flag.
    """


class DegenerateReference(CorrSparseError):
    """A relative error was requested against an all-zero reference."""


class InvalidSchedule(CorrSparseError):
    """A time-varying support schedule removes more rows than are active."""
