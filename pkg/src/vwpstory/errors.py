"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage/config -> 1, data -> 2,
numeric/training -> 3.
"""


class VwpError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(VwpError):
    """Bad command line or inconsistent configuration."""


class ConfigError(UsageError):
    """A config object violates its own invariants."""


class DataError(VwpError):
    """Input data violates a documented precondition (ids, shapes, ranges)."""


class CapacityError(DataError):
    """More distinct entities than placeholder slots."""


class ResourceError(DataError):
    """A required resource (e.g. a name list) is empty."""


class NumericError(VwpError):
    """Non-finite values or invalid numeric inputs inside a kernel."""


class StateError(NumericError):
    """Optimizer state is inconsistent (e.g. a gradient is missing)."""


class TrainingError(NumericError):
    """Training diverged; carries epoch/batch context in the message."""
