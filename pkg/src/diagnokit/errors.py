"""Exception types shared across the toolkit."""


class DiagnokitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(DiagnokitError, ValueError):
    """An object or argument violates a documented invariant."""


class ParseError(DiagnokitError, ValueError):
    """A file could not be parsed; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
