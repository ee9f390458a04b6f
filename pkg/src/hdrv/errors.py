"""Exception hierarchy shared by all hdrv modules.

The CLI maps these onto exit codes: everything deriving from
:class:`ValidationError` exits with 2, :class:`NumericError` with 3.
"""


class HdrvError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(HdrvError, ValueError):
    """Input data or arguments violate a documented precondition."""


class ParameterError(ValidationError):
    """An argument is out of its allowed range or shapes disagree."""


class DomainError(ValidationError):
    """Pixel values fall outside the value domain an operation accepts."""


class DegenerateInputError(ValidationError):
    """Input carries no usable information (e.g. every pixel masked out)."""


class DecodeError(ValidationError):
    """A file could not be decoded."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class NumericError(HdrvError, ArithmeticError):
    """An iterative computation produced non-finite values."""
