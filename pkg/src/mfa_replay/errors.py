"""
Exception hierarchy for mfa-replay.

Every error raised on purpose by this package derives from MfaReplayError, so
callers (most importantly the command-line entry point) can tell our own
failures apart from bugs. The CLI maps each family to an exit code:

- UsageError                      -> 1 (bad command, bad override key)
- DataError and its subclasses    -> 3 (missing/unreadable/mismatched data)
- everything else                 -> 2 (runtime failures during training)
"""

from pathlib import Path
from typing import Optional


class MfaReplayError(Exception):
    """Root of all errors raised on purpose by this package."""


# ============ INPUT VALIDATION ============


class ValidationError(MfaReplayError, ValueError):
    """An argument or configuration value violates a documented precondition."""


class PreconditionError(MfaReplayError, RuntimeError):
    """An operation was called in a state where it cannot run (e.g. replay at t = 0)."""


class UsageError(MfaReplayError):
    """The command line was malformed: unknown command or override key."""


# ============ DATA ============


class DataError(MfaReplayError):
    """Base class for problems with datasets on disk."""


class TaxonomyMismatchError(DataError, ValidationError):
    """A class directory on disk is not part of the configured taxonomy."""


class ImageReadError(DataError):
    """An image file could not be decoded."""

    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        self.reason = reason
        super().__init__(f"Could not read image {self.path}: {reason}")


class ManifestChecksumError(DataError):
    """The image files of a domain differ from the ones its manifest recorded."""

    def __init__(self, path: Path, expected: str, actual: str):
        self.path = Path(path)
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Images under {self.path.parent} do not match {self.path.name} "
            f"(expected {expected[:12]}, got {actual[:12]})"
        )


# ============ NUMERICS / TRAINING ============


class NumericError(MfaReplayError, ArithmeticError):
    """Non-finite values or a missing gradient path."""


class DivergenceError(MfaReplayError, RuntimeError):
    """A training loss exploded; a checkpoint may have been written before aborting."""

    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        self.checkpoint_path = checkpoint_path
        if checkpoint_path is not None:
            message = f"{message} (state saved to {checkpoint_path})"
        super().__init__(message)


class PhaseFailedError(MfaReplayError, RuntimeError):
    """A training phase failed inside run_sequence; the partial record was persisted."""

    def __init__(self, phase: str, record_path: Optional[Path], cause: BaseException):
        self.phase = phase
        self.record_path = record_path
        self.cause = cause
        super().__init__(f"Phase '{phase}' failed: {cause}")


# ============ CHECKPOINTS ============


class CheckpointError(MfaReplayError):
    """Base class for checkpoint problems."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an incompatible format version."""


class CheckpointHashError(CheckpointError):
    """The checkpoint belongs to a different configuration than the one resuming it."""


class CorruptCheckpointError(CheckpointError, DataError):
    """The file is truncated, has a bad magic number, or its payload checksum fails."""
