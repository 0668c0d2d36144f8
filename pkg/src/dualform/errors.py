"""Exception hierarchy shared across the package."""


class DualFormError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DualFormError, ValueError):
    pass


class InvalidParameterError(DualFormError, ValueError):
    pass


class ConfigurationError(DualFormError, ValueError):
    pass


class DimensionError(DualFormError, ValueError):
    pass


class SpanExceededError(DualFormError, ValueError):
    """A date distance exceeds the maximum span ``M`` of a reweighting scheme."""


class CausalityError(DualFormError, ValueError):
    """A negative token distance was requested (query before key)."""


class OutOfOrderError(DualFormError, ValueError):
    """A streaming step arrived with a position earlier than the last one."""


class NoRecurrentFormError(DualFormError, TypeError):
    """Softmax attention is not separable, so it has no constant-state recurrence."""


class InvalidDeltaError(DualFormError, ValueError):
    pass


class FormatError(DualFormError, ValueError):
    """Malformed or truncated binary payload.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(DualFormError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
