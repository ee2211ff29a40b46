"""Exception types shared across the package."""


class RelocError(Exception):
    """Base class for domain errors (bad data, inconsistent inputs)."""


class ParseError(RelocError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(RelocError):
    pass


class FormatVersionError(RelocError):
    pass


class DatabaseError(RelocError):
    pass


class GeometryUnavailable(RelocError):
    """Raised when a room or query has fewer than two objects."""


class UsageError(ValueError):
    """Programmer error: an argument violates a precondition."""
