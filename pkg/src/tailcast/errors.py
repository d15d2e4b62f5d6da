"""Exception types shared across the package."""


class TailcastError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TailcastError):
    """Tensor shapes are incompatible for the requested operation."""


class ParseError(TailcastError):
    """A text input could not be parsed.

    Carries the 1-based line number and the offending line so callers can
    point at the exact input that failed.
    """

    def __init__(self, message: str, line_number: int | None = None, line: str | None = None):
        self.line_number = line_number
        self.line = line
        if line_number is not None:
            message = f"line {line_number}: {message}"
            if line is not None:
                message = f"{message} ({line!r})"
        super().__init__(message)


class SchemaError(TailcastError):
    """Structured data does not match the expected schema."""


class TrainingError(TailcastError):
    """Training aborted because of a numerical failure (NaN loss/gradients)."""


class CheckpointError(TailcastError):
    """A checkpoint file is malformed or incompatible with the given data."""
