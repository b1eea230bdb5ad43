"""
Exception hierarchy for enkf-lab

Every error raised on purpose by the library derives from EnkfLabError so the
CLI can map it to an exit code.
"""

from typing import Optional


class EnkfLabError(Exception):
    """Base class for all enkf-lab errors"""


class InvalidInputError(EnkfLabError, ValueError):
    """Input violates a documented precondition (shape, finiteness, range)"""


class NotPSDError(InvalidInputError):
    """Matrix has an eigenvalue below the PSD tolerance"""


class NotPositiveDefiniteError(InvalidInputError):
    """Cholesky factorization hit a non-positive pivot"""


class NumericError(EnkfLabError, ArithmeticError):
    """A numeric routine failed to converge or produced non-finite output"""


class ConfigError(EnkfLabError):
    """Configuration file is missing, unreadable or fails validation"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{message} (field: {field})"
        super().__init__(message)


class ExperimentError(EnkfLabError):
    """Too many Monte Carlo trials failed for the results to be trusted"""
