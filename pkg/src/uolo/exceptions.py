"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class UOLOError(Exception):
    exit_code = 1


class ConfigurationError(UOLOError, ValueError):
    """Shapes, configs or arguments that cannot describe a valid computation."""

    exit_code = 2


class UsageError(ConfigurationError):
    """An API was called in a way its contract forbids (e.g. non-scalar backward)."""


class AssignmentCollisionError(ConfigurationError):
    """Two ground-truth boxes claimed the same (cell, anchor) slot."""


class DataError(UOLOError):
    """Unreadable or inconsistent dataset content."""

    exit_code = 3


class PreprocessingError(DataError):
    pass


class GenerationError(DataError):
    pass


class NumericError(UOLOError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""

    exit_code = 4


class TapeError(UOLOError, RuntimeError):
    """Backward requested on an output whose tape has been cleared."""
