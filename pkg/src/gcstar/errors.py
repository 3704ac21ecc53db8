"""Exception hierarchy shared across the package."""


class GCStarError(Exception):
    """Base class for package errors."""


class DomainError(GCStarError, ValueError):
    """An argument lies outside the domain of a function."""


class ConvergenceError(GCStarError, RuntimeError):
    """An iterative routine failed to reach its tolerance."""


class TruncationError(ConvergenceError):
    """A truncated series would need more terms than the configured cap."""


class MeshError(GCStarError, ValueError):
    """Invalid or unusable mesh input (collinear sites, points outside hull, ...)."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = offending


class FactorizationError(GCStarError, RuntimeError):
    """Cholesky / LU factorization of a precision matrix failed."""


class ModelSpecError(GCStarError, ValueError):
    """Inconsistent model specification or dataset."""
