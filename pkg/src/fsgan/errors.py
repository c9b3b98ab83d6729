"""Exception hierarchy shared by every stage of the pipeline.

Each error class carries the CLI exit code it maps to, so the command line
front-end can translate failures without inspecting messages.
"""

from __future__ import annotations


class FsganError(Exception):
    exit_code = 1


class ShapeError(FsganError, ValueError):
    """Operand dimensions do not chain."""


class ContractError(FsganError, ValueError):
    """A documented precondition was violated by the caller."""


class EvaluationError(FsganError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class ConfigError(FsganError, ValueError):
    exit_code = 2


class DataError(FsganError, ValueError):
    exit_code = 3


class EpisodeError(DataError):
    pass


class CheckpointError(DataError):
    """Checkpoint file is truncated, corrupted, or of an unknown version."""


class TrainingDiverged(FsganError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class CalibrationDegenerate(FsganError, RuntimeError):
    """All discriminator outputs on the holdout are equal; nothing to fit."""


class SamplerError(FsganError, RuntimeError):
    exit_code = 5

    def __init__(self, message: str, z=None):
        super().__init__(message)
        self.z = z


class StageError(FsganError, RuntimeError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception, episode: int | None = None):
        where = stage if episode is None else f"{stage} (episode {episode})"
        super().__init__(f"stage '{where}' failed: {cause}")
        self.stage = stage
        self.episode = episode
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
