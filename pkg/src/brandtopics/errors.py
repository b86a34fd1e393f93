"""Exception types shared across the package.

The CLI maps these to exit codes: ValidationError -> 1, NumericalError -> 2.
"""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or file format."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite or otherwise unusable values."""


class DegenerateStatisticError(ValidationError):
    """Raised when a statistic is undefined, e.g. rank correlation of a constant vector."""
