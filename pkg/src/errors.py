"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations

from typing import Any


class DistillError(RuntimeError):
    """Base class for all pipeline failures."""

    exit_code = 2


class ConfigError(DistillError, ValueError):
    """Invalid configuration, unknown text code or missing input."""

    exit_code = 1


class CheckpointError(DistillError):
    """A checkpoint file is corrupt, truncated or of the wrong format."""


class NonFiniteError(DistillError, FloatingPointError):
    """A loss, gradient or sampler state became NaN/inf."""

    def __init__(self, message: str, **diagnostics: Any) -> None:
        self.diagnostics = diagnostics
        if diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
