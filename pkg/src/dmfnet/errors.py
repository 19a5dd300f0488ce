"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class FormatError(ValueError):
    """A file does not follow its declared format."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CountMismatchError(FormatError):
    pass


class HeaderError(FormatError):
    pass


class ValueParseError(FormatError):
    pass


class CheckpointError(ValueError):
    """A checkpoint cannot be read or does not match the model."""
