from __future__ import annotations

from typing import Any, Sequence


class SdeIdError(Exception):
    """Base class for every error raised by the identification pipeline."""


class InvalidArgumentError(SdeIdError, ValueError):
    pass


class InsufficientResolutionError(SdeIdError, ValueError):
    pass


class UnsupportedModelError(SdeIdError, ValueError):
    pass


class EmptyModelError(SdeIdError, ValueError):
    pass


class DegenerateDiffusionError(SdeIdError, RuntimeError):
    def __init__(self, message: str, *, window: int | None = None):
        super().__init__(message)
        self.window = window


class SingularDiffusionError(SdeIdError, RuntimeError):
    def __init__(self, message: str, *, location: float | None = None):
        super().__init__(message)
        self.location = location


class SimulationBlowupError(SdeIdError, RuntimeError):
    def __init__(self, message: str, *, index: int | None = None):
        super().__init__(message)
        self.index = index


class RankDeficiencyError(SdeIdError, RuntimeError):
    def __init__(self, message: str, *, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(SdeIdError, RuntimeError):
    def __init__(self, message: str, *, result: Any = None):
        super().__init__(message)
        self.result = result


class ObjectiveIncreaseError(SdeIdError, RuntimeError):
    def __init__(self, message: str, *, sweep: int, result: Any = None):
        super().__init__(message)
        self.sweep = sweep
        self.result = result


class PipelineStageError(SdeIdError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException, hint: str = ""):
        detail = f"stage '{stage}' failed: {cause}"
        if hint:
            detail = f"{detail} (hint: {hint})"
        super().__init__(detail)
        self.stage = stage
        self.cause = cause
        self.hint = hint
