"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data and
file-format problems exit 2, numeric failures exit 3.
"""


class EmraError(Exception):
    """Base class for all package errors."""


class ConfigError(EmraError, ValueError):
    """Illegal hyperparameter or configuration value."""


class ShapeError(EmraError, ValueError):
    """Operand extents are incompatible."""


class DataError(EmraError, ValueError):
    """Input data violates a contract (unknown label colour, bad class index...)."""


class NumericError(EmraError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TrainingError(NumericError):
    """Training produced a non-finite loss or gradient."""


class FormatError(DataError):
    """A file does not follow its binary format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class MaxvalError(FormatError):
    pass


class ShortFileError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointMagicError(CheckpointError, BadMagicError):
    pass
