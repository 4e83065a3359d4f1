"""Exception hierarchy. The CLI maps these onto exit codes."""


class DistillRankError(Exception):
    """Base class for all package errors."""


class ValidationError(DistillRankError, ValueError):
    """Bad input data or configuration (exit code 1)."""


class ParseError(ValidationError):
    """A file line could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class ExternalServiceError(DistillRankError):
    """A remote dependency failed (exit code 2)."""


class TransportError(ExternalServiceError):
    """Network-level failure that survived all retries."""

    def __init__(self, message: str, attempts: int = 0):
        self.attempts = attempts
        super().__init__(message)


class APIError(ExternalServiceError):
    """Non-retryable HTTP status from a remote API."""

    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body[:500]
        super().__init__(f"API error {status}: {self.body}")
