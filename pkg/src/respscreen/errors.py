"""Exception types shared across the package."""


class RespScreenError(Exception):
    """Base class for all package errors."""


class InvalidParameter(RespScreenError, ValueError):
    pass


class DecodeError(RespScreenError):
    """Malformed or truncated WAV input."""


class EmptyFeature(RespScreenError):
    """Signal too short to produce a single analysis frame."""


class UndefinedMetric(RespScreenError):
    pass


class CheckpointError(RespScreenError):
    pass


class BackendError(RespScreenError):
    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class ValidationError(RespScreenError):
    """Manifest rows failing schema checks. ``errors`` holds (line, message) pairs."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        lines = "; ".join(f"line {n}: {msg}" for n, msg in errors[:20])
        super().__init__(f"{len(errors)} invalid manifest row(s): {lines}")
