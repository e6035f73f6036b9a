"""
Exception hierarchy shared by every stage.

Purpose:
- Let callers (and the CLI) tell config mistakes apart from bad input data and
  from failures that happen while a stage is running.
- Carry the one detail a user needs to act on (slice index, model level,
  last good checkpoint) as an attribute, not only inside the message.

Exit codes used by the CLI:
- 2 = ConfigError
- 3 = input/data errors (VolumeFormatError, ClusteringError, CheckpointError)
- 4 = runtime failures (TrainingDivergedError and anything else)
"""

from __future__ import annotations

from pathlib import Path


class TomosegError(Exception):
    """
    Base class for all package errors.
    """

    exit_code = 4


class ConfigError(TomosegError, ValueError):
    """
    Invalid, unknown or inconsistent configuration key.
    """

    exit_code = 2


class VolumeFormatError(TomosegError, ValueError):
    """
    Volume payload does not match its declared format.
    """

    exit_code = 3

    def __init__(self, message: str, *, slice_index: int | None = None) -> None:
        super().__init__(message)
        self.slice_index = slice_index


class ClusteringError(TomosegError, ValueError):
    """
    Stage-1 clustering cannot produce the requested number of classes.
    """

    exit_code = 3


class ModelConfigError(TomosegError, ValueError):
    """
    Network configuration that cannot be built or fed.
    """

    exit_code = 2

    def __init__(self, message: str, *, level: int | None = None) -> None:
        super().__init__(message)
        self.level = level


class CheckpointError(TomosegError, RuntimeError):
    """
    Missing or malformed checkpoint archive.
    """

    exit_code = 3


class TrainingDivergedError(TomosegError, RuntimeError):
    """
    Loss became NaN/Inf; training stopped.
    """

    exit_code = 4

    def __init__(self, message: str, *, last_good_checkpoint: Path | None = None) -> None:
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
