"""Exception types shared across the package."""


class StateError(RuntimeError):
    """An operation was called in the wrong state (missing forward pass, double shift, missing checkpoint)."""


class FormatError(ValueError):
    """A container or checkpoint file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedResultError(ArithmeticError):
    """The requested quantity is undefined for the given inputs (e.g. no evaluated voxels)."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""
