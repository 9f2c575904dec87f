"""Exception types shared across the package."""


class CodmError(Exception):
    """Base class for all package errors."""


class InvalidArgument(CodmError, ValueError):
    """A caller violated an operation precondition."""


class StateError(CodmError, RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class FormatError(CodmError):
    """A file (checkpoint, corpus, token file) is malformed or truncated."""


class ParseError(FormatError):
    """A line-oriented file failed to parse; carries the offending line number."""

    def __init__(self, message: str, path: str = "", line: int = 0):
        self.path = path
        self.line = line
        prefix = f"{path}:{line}: " if path or line else ""
        super().__init__(prefix + message)


class ConfigError(CodmError):
    """A run configuration is invalid (unknown keys, bad values, mismatches)."""


class NumericalError(CodmError):
    """Training or decoding produced a non-finite value; carries a diagnostic record."""

    def __init__(self, message: str, record=None):
        self.record = record
        super().__init__(message)
