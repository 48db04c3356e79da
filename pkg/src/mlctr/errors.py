"""Exception hierarchy.

Each family maps to one CLI exit code: configuration problems exit 2,
data and I/O problems exit 3, numeric divergence exits 4.
"""


class MLCTRError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(MLCTRError, ValueError):
    exit_code = 2


class UsageError(ConfigError):
    """Bad arguments to an otherwise valid call (empty batch, unknown tag)."""


class DataError(MLCTRError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class BoundsError(DataError, IndexError):
    pass


class DuplicateError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class SplitError(DataError):
    pass


class MaskError(DataError):
    pass


class FormatError(DataError):
    """Checkpoint or sidecar with an unknown or mismatched format tag."""


class TapeError(MLCTRError, RuntimeError):
    """A row tape was replayed against parameters that changed since it was recorded."""


class OracleError(MLCTRError, RuntimeError):
    pass


class DivergenceError(MLCTRError, FloatingPointError):
    exit_code = 4
