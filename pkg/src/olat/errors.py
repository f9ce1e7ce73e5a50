"""Exception types shared across the package."""


class OlatError(Exception):
    pass


class InvalidArgument(OlatError, ValueError):
    pass


class DegenerateInput(InvalidArgument):
    pass


class NumericError(OlatError, FloatingPointError):
    """A loss or activation went non-finite."""


class FormatError(OlatError, ValueError):
    """Malformed file; ``offset`` is the byte (or line) position of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(OlatError, ValueError):
    pass
