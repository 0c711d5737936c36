"""
Structured logging configuration for the cellscan toolkit.

Every module logs through ``get_logger(__name__, component)`` so that log lines
carry the pipeline component (tensorcore, imagedata, canny, nn, trainer, cli)
alongside the source location.
"""

import logging
import logging.handlers
import os
from datetime import datetime, timezone
from typing import Any, Dict, Optional

SERVICE_NAME = "cellscan"


class CellScanFormatter(logging.Formatter):
    """Formatter producing structured or compact single-line records."""

    def __init__(self, enable_structured: bool = True):
        self.enable_structured = enable_structured
        super().__init__()

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f")

        component = getattr(record, 'component', None)
        if not component:
            logger_parts = record.name.split('.')
            component = logger_parts[-1] if len(logger_parts) > 1 else 'cellscan'

        location = f"{record.filename}:{record.funcName}:{record.lineno}"
        message = record.getMessage()
        if record.exc_info and self.enable_structured:
            message = f"{message}\n{self.formatException(record.exc_info)}"

        if self.enable_structured:
            return f"{timestamp} - {SERVICE_NAME} - {component} - {record.levelname} - {location} - {message}"
        return f"[{record.levelname}] {component}:{record.funcName}:{record.lineno} - {message}"


class ComponentAdapter(logging.LoggerAdapter):
    """Adapter that adds the component to each call's own ``extra`` instead of replacing it."""

    def process(self, msg, kwargs):
        kwargs["extra"] = {**self.extra, **(kwargs.get("extra") or {})}
        return msg, kwargs


def get_logger(name: str, component: Optional[str] = None) -> logging.Logger:
    """
    Get a logger, optionally bound to a pipeline component.

    Args:
        name: Logger name (typically __name__)
        component: Optional component name for context

    Returns:
        Logger or LoggerAdapter carrying the component
    """
    logger = logging.getLogger(name)
    if component:
        logger = ComponentAdapter(logger, {'component': component})
    return logger


def configure_logging(
    log_level: str = 'INFO',
    enable_console: bool = True,
    enable_file: bool = False,
    enable_structured: bool = True,
    log_dir: str = 'logs',
    log_file: str = 'cellscan.log'
) -> None:
    """
    Configure root logging for a cellscan process.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        enable_console: Log to stderr
        enable_file: Also log to a rotating file under log_dir
        enable_structured: Use the structured line format
        log_dir: Directory for log files
        log_file: Log file name
    """
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
    root_logger.setLevel(numeric_level)

    formatter = CellScanFormatter(enable_structured=enable_structured)

    if enable_console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(numeric_level)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)

    if enable_file:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, log_file),
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    if not root_logger.handlers:
        # keeps logging.lastResort from writing to stderr
        root_logger.addHandler(logging.NullHandler())

    logging.getLogger('PIL').setLevel(logging.WARNING)

    logger = get_logger(__name__, 'logging_config')
    logger.debug(f"Logging configured: level={log_level}, console={enable_console}, "
                 f"file={enable_file}, structured={enable_structured}")


def _reduce_paths(values: Dict[str, Any]) -> Dict[str, Any]:
    """Keep only the file name of path-like values."""
    reduced = {}
    for key, value in values.items():
        if any(marker in key.lower() for marker in ('path', 'root', 'file', 'dir')):
            reduced[key] = os.path.basename(str(value)) if value else None
        else:
            reduced[key] = value
    return reduced


def log_error_context(
    logger: logging.Logger,
    error: Exception,
    operation: str,
    context: Optional[Dict[str, Any]] = None
) -> None:
    """
    Log an error together with the operation and its context.

    Args:
        logger: Logger instance
        error: Exception that occurred
        operation: Operation being performed when error occurred
        context: Additional context information
    """
    logger.error(
        f"Error in {operation}: {error.__class__.__name__}: {error}",
        extra={
            'operation': operation,
            'error_type': error.__class__.__name__,
            'context': _reduce_paths(context or {}),
        },
        exc_info=logger.isEnabledFor(logging.DEBUG)
    )


def log_stage_metrics(
    logger: logging.Logger,
    operation: str,
    processing_time: float,
    info: Dict[str, Any],
    success: bool = True
) -> None:
    """
    Log the duration and counters of a pipeline stage.

    Args:
        logger: Logger instance
        operation: Stage name (e.g. "epoch", "preprocess_corpus")
        processing_time: Wall-clock seconds
        info: Counters and values describing the stage
        success: Whether the stage completed
    """
    status = "success" if success else "failed"
    details = ", ".join(f"{key}={value}" for key, value in _reduce_paths(info).items())
    logger.info(
        f"Stage {status}: {operation} completed in {processing_time:.3f}s ({details})",
        extra={
            'operation': operation,
            'processing_time': processing_time,
            'stage_info': info,
            'success': success
        }
    )
