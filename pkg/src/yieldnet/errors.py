"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """A backward pass was requested without the matching forward cache."""


class FormatError(ValueError):
    """A binary file does not match the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InputError(ValueError):
    """Invalid user-supplied data or arguments."""


class EvaluationError(ArithmeticError):
    """A function evaluated to a non-finite value."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        super().__init__(message or f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


class ConfigMismatchError(FormatError):
    """A checkpoint was built for a different model configuration."""
