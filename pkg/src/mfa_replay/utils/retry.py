"""
Retry logic with exponential backoff for filesystem I/O.

Datasets and checkpoints frequently live on network filesystems where an open
or a rename can fail transiently (stale NFS handles, busy files, interrupted
system calls). Those errors are retried with exponential backoff; permanent
failures (missing file, permission denied, undecodable image) are raised
immediately because retrying cannot help.
"""

import errno
import logging
from typing import Callable, TypeVar

from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception,
    stop_after_attempt,
    wait_exponential,
)

from mfa_replay.config import RuntimeConfig

logger = logging.getLogger(__name__)

# errno values that usually clear up on their own
RETRYABLE_ERRNOS = {
    errno.EAGAIN,
    errno.EBUSY,
    errno.EINTR,
    errno.ETIMEDOUT,
    errno.ESTALE,
    errno.EIO,
}

T = TypeVar("T")


def is_transient_io_error(exception: BaseException) -> bool:
    """
    Decide whether an exception is a transient filesystem error.

    FileNotFoundError and PermissionError are never transient; other OSErrors
    are transient when their errno is in RETRYABLE_ERRNOS.
    """
    if isinstance(exception, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return False
    if isinstance(exception, OSError):
        return exception.errno in RETRYABLE_ERRNOS
    return False


def call_with_io_retry(
    func: Callable[..., T],
    *args,
    attempts: int | None = None,
    max_wait: float = 10.0,
    **kwargs,
) -> T:
    """
    Call `func(*args, **kwargs)`, retrying transient I/O failures.

    Args:
        func: The I/O operation
        attempts: Total attempts (defaults to RuntimeConfig.IO_RETRIES)
        max_wait: Upper bound of the exponential wait in seconds

    Returns:
        Whatever func returns

    Raises:
        The original exception once attempts are exhausted or if it is permanent
    """
    retrying = Retrying(
        stop=stop_after_attempt(attempts or RuntimeConfig.IO_RETRIES),
        wait=wait_exponential(multiplier=0.5, min=min(0.5, max_wait), max=max_wait),
        retry=retry_if_exception(is_transient_io_error),
        before_sleep=before_sleep_log(logger, logging.DEBUG),
        reraise=True,
    )
    return retrying(func, *args, **kwargs)
