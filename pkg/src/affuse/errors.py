"""Exception hierarchy.

Everything raised deliberately by the package derives from ``AffuseError``.
The CLI maps ``UserError`` subclasses (bad input, bad config) to exit code 1
and anything else to exit code 2.
"""


class AffuseError(Exception):
    """Base class for all package errors."""


class UserError(AffuseError):
    """Errors caused by inputs or configuration rather than by a bug."""


class DimensionError(UserError, ValueError):
    pass


class ConfigurationError(UserError, ValueError):
    pass


class NumericError(AffuseError, ArithmeticError):
    pass


class DataError(UserError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class DuplicateError(ParseError):
    pass


class ValidationError(DataError):
    pass


class AlignmentError(DataError):
    pass


class AmbiguityError(DataError):
    pass


class StateError(AffuseError, RuntimeError):
    pass


class DeterminismError(AffuseError, RuntimeError):
    pass


class ProviderError(AffuseError, RuntimeError):
    """Embedding provider unreachable or failing after retries."""


class ContractViolationError(ProviderError):
    """Provider answered, but the payload breaks the wire contract."""


class CheckpointError(UserError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigHashError(CheckpointError):
    pass
