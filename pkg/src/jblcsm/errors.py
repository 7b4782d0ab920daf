"""Exception hierarchy shared across the package."""


class JBLCSMError(Exception):
    """Base class for all package-specific errors."""


class DivergentCurveError(JBLCSMError):
    """Raised when exp(gamma * t) would overflow (|gamma * t| > 700)."""


class NonPositiveDefiniteError(JBLCSMError):
    """Raised when an implied covariance matrix is not positive definite."""


class DataFormatError(JBLCSMError):
    """Raised on malformed input files (bad header, ragged rows, bad cells)."""


class ConditionAbortError(JBLCSMError):
    """Raised when a simulation condition trips the pathology guard."""
