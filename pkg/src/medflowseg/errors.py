"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/data/usage problems
exit with 2, numeric failures with 3.
"""


class MedFlowSegError(Exception):
    """Base class for all package errors."""


class ShapeError(MedFlowSegError, ValueError):
    """Tensor shapes violate an operation's contract."""


class DomainError(MedFlowSegError, ValueError):
    """An argument value is outside its valid domain."""


class ConfigurationError(MedFlowSegError, ValueError):
    """A model or run configuration is internally inconsistent."""


class DataError(MedFlowSegError, ValueError):
    """Dataset contents violate the expected layout or label range."""


class NumericError(MedFlowSegError, RuntimeError):
    """A computation produced non-finite or otherwise unusable values."""
