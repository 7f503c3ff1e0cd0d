"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an input violates a documented precondition."""


class ConfigError(InvalidArgumentError):
    """Invalid experiment configuration. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(RuntimeError):
    """Malformed or missing input data (CSV rows, chip files)."""


class NumericError(RuntimeError):
    """Non-finite loss or parameters during training."""
