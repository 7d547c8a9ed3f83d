"""Exception types shared across the toolkit."""


class MitodetError(Exception):
    """Base class for all toolkit errors."""


class RejectedInputError(MitodetError, ValueError):
    """An argument violates an operation's precondition."""


class CorruptMaskError(MitodetError):
    """A run-length mask is internally inconsistent."""


class ManifestError(MitodetError):
    """A manifest file could not be parsed. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RecordValidationError(MitodetError):
    """An object record violates a structural invariant. Carries the record id."""

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)


class ConfigurationError(MitodetError):
    """A configuration value or combination is unusable."""


class BackendError(MitodetError):
    """A proposal backend failed. Carries the tile id when known."""

    def __init__(self, message: str, tile_id: str | None = None):
        self.tile_id = tile_id
        if tile_id is not None:
            message = f"tile {tile_id!r}: {message}"
        super().__init__(message)


class NoObjectError(MitodetError):
    """A box prompt produced no usable mask."""


class RegistrationError(MitodetError):
    """Slide registration failed. Carries diagnostics for debugging."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class TaskNotFoundError(MitodetError):
    """A review task id is unknown."""


class DuplicateVerdictError(MitodetError):
    """An annotator already submitted a verdict for this task."""


class InvalidTransitionError(MitodetError):
    """A label event would move a task along a forbidden status transition."""


class UnauthorizedAnnotatorError(MitodetError):
    """The annotator may not act on this task (not assigned, or wrong role)."""
