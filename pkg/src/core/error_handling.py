"""
Error types and error-handling helpers for the cellscan toolkit.

All library failures derive from ``CellScanError`` so that the command-line
surface can separate usage problems from runtime failures.
"""

import functools
import time
from typing import Any, Callable, Optional

from .logging_config import get_logger, log_error_context


class CellScanError(Exception):
    """Base exception for all cellscan errors."""
    component = "cellscan"


class ShapeError(CellScanError):
    """Exception raised when tensor or layer shapes do not agree."""
    component = "tensorcore"


class ParameterError(CellScanError, ValueError):
    """Exception raised when an argument is outside its valid range."""
    pass


class NumericError(CellScanError):
    """Exception raised when an operation produces non-finite values."""
    component = "tensorcore"


class ImageDecodeError(CellScanError):
    """Exception raised when a PNG stream is malformed."""
    component = "imagedata"


class UnsupportedFormatError(ImageDecodeError):
    """Exception raised for 16-bit or otherwise unsupported PNG modes."""
    pass


class DatasetLayoutError(CellScanError):
    """Exception raised when a dataset root lacks a class directory."""
    component = "imagedata"


class EmptyClassError(DatasetLayoutError):
    """Exception raised when a class directory holds no PNG files."""
    pass


class ImageLoadError(CellScanError):
    """Exception raised when an indexed image cannot be read."""
    component = "imagedata"


class BatchSizeError(CellScanError):
    """Exception raised when train-mode batch norm receives a single sample."""
    component = "nn"


class ModelStateError(CellScanError):
    """Exception raised when backward is called without a fresh forward cache."""
    component = "nn"


class ConfigurationError(CellScanError):
    """Exception raised when a model or training configuration is inconsistent."""
    component = "trainer"


class ModelFormatError(CellScanError):
    """Exception raised when a model file is malformed."""
    component = "trainer"

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorpusIOError(CellScanError):
    """Exception raised when a corpus directory or report path is unusable."""
    component = "trainer"


class TrainingError(CellScanError):
    """Exception raised when a training run fails mid-epoch."""
    component = "trainer"

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


def handle_pipeline_errors(operation_name: str, component: str = "pipeline"):
    """
    Decorator logging a pipeline operation and normalising its failures.

    CellScanErrors are logged with context and re-raised unchanged; any other
    exception is wrapped in a CellScanError chained to the original.

    Args:
        operation_name: Name of the operation being performed
        component: Component name for logging context
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            logger = get_logger(func.__module__, component)
            start_time = time.perf_counter()

            logger.debug(f"Starting {operation_name}")

            try:
                result = func(*args, **kwargs)
                duration = time.perf_counter() - start_time
                logger.debug(f"Completed {operation_name} in {duration:.2f}s")
                return result

            except CellScanError as e:
                context = {
                    'duration': time.perf_counter() - start_time,
                    'args_count': len(args),
                    'kwargs_keys': list(kwargs.keys())
                }
                log_error_context(logger, e, operation_name, context)
                raise

            except Exception as e:
                context = {
                    'duration': time.perf_counter() - start_time,
                    'args_count': len(args),
                    'kwargs_keys': list(kwargs.keys())
                }
                wrapped_error = CellScanError(f"Unexpected error in {operation_name}: {e}")
                wrapped_error.component = component
                log_error_context(logger, wrapped_error, operation_name, context)
                raise wrapped_error from e

        return wrapper
    return decorator


def validate_image_dimensions(width: Optional[int] = None, height: Optional[int] = None) -> None:
    """
    Validate target image dimensions.

    Args:
        width: Image width in pixels
        height: Image height in pixels

    Raises:
        ParameterError: If a dimension is not a positive integer
    """
    if width is not None:
        if not isinstance(width, int) or width <= 0:
            raise ParameterError(f"Invalid width: {width}. Must be a positive number of pixels.")

    if height is not None:
        if not isinstance(height, int) or height <= 0:
            raise ParameterError(f"Invalid height: {height}. Must be a positive number of pixels.")
