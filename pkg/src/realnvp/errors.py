"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class DomainError(ValueError):
    """An input lies outside the domain of the operation (e.g. log of a non-positive value)."""


class NumericalDivergence(ArithmeticError):
    """Non-finite values appeared during evaluation or optimization.

    ``where`` names the offending layer index or parameter so that the trainer
    and CLI can report it.
    """

    def __init__(self, message, where=None):
        self.where = where
        if where is not None:
            message = f"{message} (at {where})"
        super().__init__(message)


class FormatError(ValueError):
    """A binary container is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid configuration key or value."""
