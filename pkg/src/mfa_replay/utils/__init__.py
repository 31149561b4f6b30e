"""Utility modules for mfa-replay"""

from .file_access import FileAccessRecorder
from .logging import (
    get_logger,
    log_context,
    log_metrics,
    log_phase,
    setup_structured_logging,
)
from .retry import call_with_io_retry, is_transient_io_error
from .seeding import seed_everything, torch_generator

__all__ = [
    "FileAccessRecorder",
    "call_with_io_retry",
    "is_transient_io_error",
    "setup_structured_logging",
    "get_logger",
    "log_context",
    "log_metrics",
    "log_phase",
    "seed_everything",
    "torch_generator",
]
