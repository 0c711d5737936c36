"""
Canny edge detection for segmented cell images.

Stages: Gaussian smoothing, Sobel gradients, non-maximum suppression along
the quantised gradient direction, and hysteresis thresholding. Filtering
uses ``scipy.ndimage`` with edge-clamped borders ("nearest").
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from src.core import ParameterError, get_logger, handle_pipeline_errors, log_stage_metrics
from src.imagedata import (
    DatasetEntry,
    GrayImage,
    RgbImage,
    encode_png,
    gray_from_array,
    load_image,
    scan_dataset,
    to_grayscale,
)

logger = get_logger(__name__, 'canny')

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

# (dy, dx) of one neighbour along the gradient axis; the other is the mirror
_NMS_OFFSETS = {
    0: (0, 1),
    45: (1, 1),
    90: (1, 0),
    135: (1, -1),
}

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class CannyParams(BaseModel):
    """Smoothing and threshold settings, thresholds on the [0, 255] scale."""
    model_config = ConfigDict(frozen=True)

    sigma: float = Field(1.4, gt=0)
    low_threshold: float = Field(50.0, ge=0, le=255)
    high_threshold: float = Field(100.0, ge=0, le=255)

    @model_validator(mode="after")
    def _ordered_thresholds(self) -> "CannyParams":
        if not self.low_threshold < self.high_threshold:
            raise ValueError(
                f"low_threshold ({self.low_threshold}) must be below high_threshold ({self.high_threshold})")
        return self


@dataclass(frozen=True)
class GradientField:
    width: int
    height: int
    magnitude: np.ndarray      # float64 [height, width], >= 0
    direction_bin: np.ndarray  # uint8 [height, width], one of 0/45/90/135


@dataclass(frozen=True)
class CorpusSummary:
    images: int
    source_bytes: int
    output_bytes: int

    @property
    def ratio(self) -> float:
        return self.output_bytes / self.source_bytes if self.source_bytes else 0.0


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian of radius ceil(3 sigma)."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(img: GrayImage, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing; returns a real-valued field."""
    kernel = gaussian_kernel(sigma)
    field = img.pixels.astype(np.float64)
    field = ndimage.correlate1d(field, kernel, axis=0, mode='nearest')
    return ndimage.correlate1d(field, kernel, axis=1, mode='nearest')


def quantize_direction(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Nearest of 0/45/90/135 degrees, ties toward the lower angle."""
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    bins = np.mod(np.ceil((angle - 22.5) / 45.0).astype(np.int64), 4)
    return (bins * 45).astype(np.uint8)


def sobel_gradients(field: np.ndarray) -> GradientField:
    """3x3 Sobel gradients with edge-clamped borders."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2 or field.shape[0] < 3 or field.shape[1] < 3:
        raise ParameterError(f"Sobel gradients need an image of at least 3x3, got {list(field.shape)}")
    gx = ndimage.correlate(field, SOBEL_X, mode='nearest')
    gy = ndimage.correlate(field, SOBEL_Y, mode='nearest')
    return GradientField(
        width=field.shape[1],
        height=field.shape[0],
        magnitude=np.hypot(gx, gy),
        direction_bin=quantize_direction(gx, gy),
    )


def nonmax_suppression(g: GradientField) -> np.ndarray:
    """
    Keep a pixel's magnitude iff it is >= both neighbours along its gradient axis.

    A pixel missing either neighbour (image border on that axis) is suppressed.
    """
    mag = g.magnitude
    h, w = mag.shape
    # +inf padding makes a missing neighbour always win the comparison
    padded = np.pad(mag, 1, constant_values=np.inf)
    thinned = np.zeros_like(mag)
    for angle, (dy, dx) in _NMS_OFFSETS.items():
        ahead = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        behind = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep = (g.direction_bin == angle) & (mag >= ahead) & (mag >= behind)
        thinned[keep] = mag[keep]
    return thinned


def hysteresis(thinned: np.ndarray, low: float, high: float) -> GrayImage:
    """
    Double-threshold edge linking.

    Pixels >= high seed edges; nonzero pixels >= low survive when they are
    8-connected to a seed through other surviving pixels. Zero-magnitude
    pixels (flat regions and everything suppression removed) are never weak
    candidates, so low=0 links any nonzero ridge pixel without flooding the
    background.
    """
    if not 0 <= low < high:
        raise ParameterError(f"Hysteresis thresholds must satisfy 0 <= low < high, got low={low}, high={high}")
    strong = thinned >= high
    candidate = (thinned >= low) & (thinned > 0)
    labels, _ = ndimage.label(candidate, structure=EIGHT_CONNECTED)
    seeded = np.unique(labels[strong])
    edges = np.isin(labels, seeded[seeded > 0])
    return gray_from_array(np.where(edges, 255, 0))


def canny_pipeline(img: RgbImage, params: CannyParams) -> GrayImage:
    """Binary (0/255) edge map at the image's native resolution."""
    blurred = gaussian_blur(to_grayscale(img), params.sigma)
    gradients = sobel_gradients(blurred)
    return hysteresis(nonmax_suppression(gradients), params.low_threshold, params.high_threshold)


@handle_pipeline_errors("preprocess_corpus", "canny")
def preprocess_corpus(
    src_root: Union[str, Path],
    dst_root: Union[str, Path],
    params: CannyParams,
    threads: int = 1,
) -> CorpusSummary:
    """
    Write the Canny edge map of every corpus image into a mirrored tree.

    File names and class directories are preserved; outputs are single-channel
    PNGs. Re-running over the same inputs rewrites identical bytes.
    """
    src_root, dst_root = Path(src_root), Path(dst_root)
    index = scan_dataset(src_root)
    start_time = time.perf_counter()

    def convert(entry: DatasetEntry) -> tuple:
        target = dst_root / entry.path.relative_to(src_root)
        target.parent.mkdir(parents=True, exist_ok=True)
        encoded = encode_png(canny_pipeline(load_image(entry.path), params))
        target.write_bytes(encoded)
        return entry.path.stat().st_size, len(encoded)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            sizes = list(executor.map(convert, index.entries))
    else:
        sizes = [convert(entry) for entry in index.entries]

    summary = CorpusSummary(
        images=len(sizes),
        source_bytes=sum(s for s, _ in sizes),
        output_bytes=sum(o for _, o in sizes),
    )
    log_stage_metrics(logger, "preprocess_corpus", time.perf_counter() - start_time, {
        'images': summary.images,
        'source_bytes': summary.source_bytes,
        'output_bytes': summary.output_bytes,
        'ratio': round(summary.ratio, 4),
        'sigma': params.sigma,
        'low': params.low_threshold,
        'high': params.high_threshold,
    })
    return summary
