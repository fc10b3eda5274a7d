"""Exception types shared across the package."""


class ProbitMlmError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(ProbitMlmError):
    """A matrix that must be positive definite is not."""


class NoConvergence(ProbitMlmError):
    """An iterative decomposition failed to converge within its cap."""


class DimTooLarge(ProbitMlmError):
    """Requested dimension exceeds what a generator supports."""


class ZeroVector(ProbitMlmError):
    """A nonzero vector was required."""


class BadDimension(ProbitMlmError):
    """Inconsistent or unsupported problem dimensions."""


class NodeBudgetExceeded(ProbitMlmError):
    """A tensor quadrature grid would exceed the configured node budget."""


class NotApplicable(ProbitMlmError):
    """A rewrite or reduction does not apply to the given problem."""


class MonotonicityViolation(ProbitMlmError):
    """The time-varying linear predictor is not increasing at an event time."""


class ParseError(ProbitMlmError):
    """A data file failed to parse; message carries row/column context."""


class SchemaMismatch(ProbitMlmError):
    """A data file header does not match the expected schema."""


class PrecisionNotReached(ProbitMlmError):
    """The ground-truth sampler hit its sample cap before its error target."""


class CannotReachTarget(ProbitMlmError):
    """Calibration exhausted its budget without meeting the error target."""
