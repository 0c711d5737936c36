"""
Core infrastructure shared by the cellscan modules.

This package contains the structured logging setup and the error hierarchy
used across tensor, image, edge-detection, network and training code.
"""

from .error_handling import (
    BatchSizeError,
    CellScanError,
    ConfigurationError,
    CorpusIOError,
    DatasetLayoutError,
    EmptyClassError,
    ImageDecodeError,
    ImageLoadError,
    ModelFormatError,
    ModelStateError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingError,
    UnsupportedFormatError,
    handle_pipeline_errors,
    validate_image_dimensions,
)
from .logging_config import (
    configure_logging,
    get_logger,
    log_error_context,
    log_stage_metrics,
)

__all__ = [
    # Error handling
    'BatchSizeError',
    'CellScanError',
    'ConfigurationError',
    'CorpusIOError',
    'DatasetLayoutError',
    'EmptyClassError',
    'ImageDecodeError',
    'ImageLoadError',
    'ModelFormatError',
    'ModelStateError',
    'NumericError',
    'ParameterError',
    'ShapeError',
    'TrainingError',
    'UnsupportedFormatError',
    'handle_pipeline_errors',
    'validate_image_dimensions',
    # Logging
    'configure_logging',
    'get_logger',
    'log_error_context',
    'log_stage_metrics',
]
