"""Exception hierarchy shared by all modules."""


class BMapError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(BMapError, ValueError):
    """Bad input: wrong shapes, out-of-range values, unknown names."""


class FormatError(ValidationError):
    """Malformed file contents.

    ``offset`` is the byte offset (or line number for text formats) where the
    problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(BMapError, ArithmeticError):
    """A computation produced NaN/inf and cannot continue."""
