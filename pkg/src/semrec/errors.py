"""Exception taxonomy. The CLI maps these onto distinct exit codes."""


class SemrecError(Exception):
    """Base class for all package errors."""


class ConfigError(SemrecError):
    """Invalid or inconsistent configuration."""


class DataError(SemrecError):
    """Malformed or contract-violating input data."""


class ProtocolError(SemrecError):
    """A declared protocol was violated (split rules, wire formats, shapes)."""


class ProviderError(SemrecError):
    """Permanent embedding-provider failure after retries."""

    def __init__(self, message: str, failed_indices: list[int] | None = None):
        super().__init__(message)
        self.failed_indices = failed_indices or []


class DecodeError(SemrecError):
    """A token sequence could not be resolved to a catalog item."""


class TrainingError(SemrecError):
    """Training diverged or otherwise failed at runtime."""
