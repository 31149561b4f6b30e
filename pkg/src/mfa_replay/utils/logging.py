"""
Structured logging configuration for mfa-replay.

Provides JSON-formatted logs with structured context (step, losses, surrogate
values) so long training runs can be inspected with ordinary JSON tooling.
"""

import logging
import logging.handlers
import sys
import tempfile
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    # New import path (pythonjsonlogger >= 3.0.0)
    from pythonjsonlogger.json import JsonFormatter as BaseJsonFormatter
except ImportError:
    # Old import path (pythonjsonlogger < 3.0.0)
    from pythonjsonlogger.jsonlogger import JsonFormatter as BaseJsonFormatter

ROOT_LOGGER_NAME = "mfa_replay"
METRICS_LOGGER_NAME = f"{ROOT_LOGGER_NAME}.metrics"


class CustomJsonFormatter(BaseJsonFormatter):
    """JSON formatter with additional context fields."""

    def add_fields(self, log_record: dict, record: logging.LogRecord, message_dict: dict) -> None:
        """Add custom fields to log record."""
        try:
            super().add_fields(log_record, record, message_dict)
        except KeyError:
            # User-provided extra fields take precedence
            pass

        if "timestamp" not in log_record:
            log_record["timestamp"] = (
                datetime.now(timezone.utc).replace(tzinfo=None).isoformat() + "Z"
            )
        if "level" not in log_record:
            log_record["level"] = record.levelname
        if "module" not in log_record:
            log_record["module"] = record.name
        if "function" not in log_record:
            log_record["function"] = record.funcName
        if "line_number" not in log_record:
            log_record["line_number"] = record.lineno
        if "process" not in log_record:
            log_record["process"] = record.process
        if "message" not in log_record:
            log_record["message"] = message_dict.get("message", record.getMessage())


def _default_log_dir() -> Path:
    try:
        logs_dir = Path.cwd() / "logs"
        logs_dir.mkdir(parents=True, exist_ok=True)
        return logs_dir
    except (OSError, PermissionError):
        logs_dir = Path(tempfile.gettempdir()) / "mfa_replay_logs"
        logs_dir.mkdir(parents=True, exist_ok=True)
        return logs_dir


def setup_structured_logging(
    log_level: str = "INFO",
    json_output: bool = True,
    log_file: Optional[str] = None,
) -> logging.Logger:
    """
    Configure structured logging for the application.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        json_output: If True, console output is JSON; otherwise plain text
        log_file: Optional file path for the main log (defaults to ./logs/mfa_replay.log)

    Returns:
        Configured package logger
    """
    root_logger = logging.getLogger()

    # Keep pytest's caplog handlers in place
    has_pytest_handler = any(
        "pytest" in str(type(h).__module__).lower() or "caplog" in str(type(h).__name__).lower()
        for h in root_logger.handlers
    )
    if not has_pytest_handler:
        for handler in root_logger.handlers[:]:
            root_logger.removeHandler(handler)

    root_logger.setLevel(getattr(logging, log_level))

    # Third-party chatter
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    plain = logging.Formatter(
        fmt="%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    if json_output:
        formatter: logging.Formatter = CustomJsonFormatter(
            fmt="%(timestamp)s %(level)s %(name)s %(message)s"
        )
        file_formatter: logging.Formatter = CustomJsonFormatter(
            fmt="%(timestamp)s %(level)s %(name)s %(message)s"
        )
    else:
        formatter = plain
        file_formatter = plain

    # stderr keeps stdout free for tables and machine-readable output
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    log_path = Path(log_file) if log_file is not None else _default_log_dir() / "mfa_replay.log"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    # All logs (10 MB per file, keep 10 backups)
    file_handler = logging.handlers.RotatingFileHandler(
        str(log_path), maxBytes=10 * 1024 * 1024, backupCount=10
    )
    file_handler.setFormatter(file_formatter)
    root_logger.addHandler(file_handler)

    # Errors only
    error_handler = logging.handlers.RotatingFileHandler(
        str(log_path.parent / "mfa_replay_errors.log"), maxBytes=5 * 1024 * 1024, backupCount=10
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(file_formatter)
    root_logger.addHandler(error_handler)

    # Per-step training metrics go to their own file
    metrics_handler = logging.handlers.RotatingFileHandler(
        str(log_path.parent / "mfa_replay_metrics.log"),
        maxBytes=20 * 1024 * 1024,
        backupCount=10,
    )
    metrics_handler.setLevel(logging.DEBUG)
    metrics_handler.setFormatter(CustomJsonFormatter(fmt="%(timestamp)s %(name)s %(message)s"))
    metrics_logger = logging.getLogger(METRICS_LOGGER_NAME)
    for handler in metrics_logger.handlers[:]:
        metrics_logger.removeHandler(handler)
    metrics_logger.addHandler(metrics_handler)
    metrics_logger.setLevel(logging.DEBUG)

    app_logger = logging.getLogger(ROOT_LOGGER_NAME)
    app_logger.setLevel(getattr(logging, log_level))
    return app_logger


def get_logger(name: str) -> logging.Logger:
    """Get a logger for a specific module."""
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


def log_metrics(phase: str, step: int, values: Mapping[str, float], **context: Any) -> None:
    """
    Log one training step's scalars as structured fields.

    Args:
        phase: Training phase name (e.g. "adapt_classifier")
        step: Global step counter within the phase
        values: Loss and surrogate values, already converted to floats
        **context: Extra fields (domain index, epoch, ...)
    """
    metrics_logger = logging.getLogger(METRICS_LOGGER_NAME)
    rounded = {k: round(float(v), 6) for k, v in values.items()}
    message = f"{phase} step={step} " + " ".join(f"{k}={v:.4f}" for k, v in rounded.items())
    metrics_logger.info(message, extra={"phase": phase, "step": step, **rounded, **context})


def log_phase(func):
    """
    Decorator timing a training phase and logging success or failure.

    Usage:
        @log_phase
        def train_source_classifier(config, source): ...
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        logger = logging.getLogger(f"{ROOT_LOGGER_NAME}.phases")
        start_time = time.time()
        phase = func.__name__
        logger.info(f"Phase '{phase}' started", extra={"phase": phase})
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            logger.error(
                f"Phase '{phase}' failed: {e}",
                extra={
                    "phase": phase,
                    "duration_seconds": round(time.time() - start_time, 3),
                    "error_type": type(e).__name__,
                    "status": "error",
                },
                exc_info=True,
            )
            raise
        logger.info(
            f"Phase '{phase}' completed",
            extra={
                "phase": phase,
                "duration_seconds": round(time.time() - start_time, 3),
                "status": "success",
            },
        )
        return result

    return wrapper


@contextmanager
def log_context(logger: logging.Logger, event_name: str, **context: Any):
    """
    Context manager for logging an operation with timing and context.

    Usage:
        with log_context(logger, "evaluate", domain=2):
            ...
    """
    start_time = time.time()
    logger.info(f"{event_name} started", extra={"event": event_name, **context})
    try:
        yield
    except Exception as e:
        logger.error(
            f"{event_name} failed: {e}",
            extra={
                "event": event_name,
                "duration_seconds": round(time.time() - start_time, 3),
                "error_type": type(e).__name__,
                "error_message": str(e),
                "status": "error",
                **context,
            },
            exc_info=True,
        )
        raise
    else:
        logger.info(
            f"{event_name} completed",
            extra={
                "event": event_name,
                "duration_seconds": round(time.time() - start_time, 3),
                "status": "success",
                **context,
            },
        )
