"""Exception types shared across the package."""


class DragSceneError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DragSceneError):
    """Malformed numeric input (non-finite values, singular matrices, ...)."""


class ContractError(DragSceneError):
    """A caller violated an operation's precondition."""


class ConfigurationError(DragSceneError):
    """Invalid or inconsistent configuration."""


class FormatError(DragSceneError):
    """A serialized file is malformed; names the offending field."""


class EmptySceneError(DragSceneError):
    """An operation required at least one valid scene element."""


class NumericalFailureError(DragSceneError):
    """A numerical iteration produced non-finite values.

    ``step`` carries the iteration / schedule index at which the failure
    was detected.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class OptimizationFailureError(NumericalFailureError):
    """An optimization loop diverged."""


class StageFailure(DragSceneError):
    """A pipeline stage failed; wraps the underlying error with the stage
    name so callers know which intermediate artifacts exist."""

    def __init__(self, stage: str, cause: DragSceneError):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
