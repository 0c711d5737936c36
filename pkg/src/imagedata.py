"""
Image I/O and dataset plumbing for the segmented-cell corpus.

PNG decoding and encoding go through Pillow, resampling through scipy.ndimage;
pixel buffers are numpy uint8 arrays. The dataset layout is the published NIH one:
``<root>/Parasitized/*.png`` and ``<root>/Uninfected/*.png``.
"""

import enum
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from src.core import (
    DatasetLayoutError,
    EmptyClassError,
    ImageDecodeError,
    ImageLoadError,
    ParameterError,
    UnsupportedFormatError,
    get_logger,
    handle_pipeline_errors,
    validate_image_dimensions,
)
from src.tensorcore import Rng, Tensor, default_dtype

logger = get_logger(__name__, 'imagedata')

PNG_SIGNATURE = b'\x89PNG\r\n\x1a\n'
INPUT_SIZE = 64
MODES = ("raw", "canny")

# ITU-R BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Rng stream ids
_SPLIT_STREAM = 1
_SHUFFLE_STREAM = 2
_SUBSET_STREAM = 3


class CellLabel(enum.IntEnum):
    UNINFECTED = 0
    INFECTED = 1

    @property
    def display(self) -> str:
        return self.name.lower()


CLASS_DIRS = {
    "Parasitized": CellLabel.INFECTED,
    "Uninfected": CellLabel.UNINFECTED,
}


@dataclass(frozen=True)
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8 [height, width, 3]

    def __post_init__(self):
        validate_image_dimensions(self.width, self.height)
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ParameterError(
                f"RGB pixel buffer must be uint8 {[self.height, self.width, 3]}, "
                f"got {self.pixels.dtype} {list(self.pixels.shape)}")


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8 [height, width]

    def __post_init__(self):
        validate_image_dimensions(self.width, self.height)
        if self.pixels.shape != (self.height, self.width) or self.pixels.dtype != np.uint8:
            raise ParameterError(
                f"Gray pixel buffer must be uint8 {[self.height, self.width]}, "
                f"got {self.pixels.dtype} {list(self.pixels.shape)}")


AnyImage = Union[RgbImage, GrayImage]


def rgb_from_array(pixels: np.ndarray) -> RgbImage:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    return RgbImage(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)


def gray_from_array(pixels: np.ndarray) -> GrayImage:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    return GrayImage(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)


@dataclass(frozen=True)
class DatasetEntry:
    path: Path
    label: CellLabel


@dataclass(frozen=True)
class DatasetIndex:
    """Labelled file catalogue; immutable once built."""
    entries: Tuple[DatasetEntry, ...]
    mode: str = "raw"
    root: Optional[Path] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"Unknown dataset mode '{self.mode}'. Must be one of {list(MODES)}.")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def counts(self) -> Dict[CellLabel, int]:
        counts = {label: 0 for label in CellLabel}
        for entry in self.entries:
            counts[entry.label] += 1
        return counts

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(entry.label) for entry in self.entries], dtype=np.int64)

    @property
    def channels(self) -> int:
        return 3 if self.mode == "raw" else 1

    def with_entries(self, entries: Sequence[DatasetEntry]) -> "DatasetIndex":
        return DatasetIndex(entries=tuple(entries), mode=self.mode, root=self.root)


@dataclass(frozen=True)
class Batch:
    inputs: Tensor   # [batch, channels, size, size] in [0, 1]
    targets: Tensor  # [batch] of 0/1
    paths: Tuple[Path, ...] = field(default=())

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def _png_header(data: bytes) -> Tuple[int, int]:
    """Return (bit_depth, color_type) from the IHDR chunk."""
    if not data.startswith(PNG_SIGNATURE):
        raise ImageDecodeError("Not a PNG stream: bad signature at byte offset 0")
    if len(data) < 33 or data[12:16] != b'IHDR':
        raise ImageDecodeError(f"Missing IHDR chunk at byte offset 8 (stream length {len(data)})")
    bit_depth, color_type = struct.unpack(">BB", data[24:26])
    return bit_depth, color_type


def decode_png(data: bytes) -> RgbImage:
    """
    Decode an 8-bit PNG into an RGB image.

    Grayscale and palette images are expanded to RGB; alpha is discarded.

    Raises:
        ImageDecodeError: malformed or truncated stream (with byte offset)
        UnsupportedFormatError: 16-bit samples
    """
    bit_depth, color_type = _png_header(data)
    if bit_depth > 8:
        raise UnsupportedFormatError(
            f"Unsupported PNG: {bit_depth}-bit samples (color type {color_type}); only 8-bit images are accepted")

    stream = BytesIO(data)
    try:
        with Image.open(stream, formats=["PNG"]) as image:
            image.load()
            if image.mode in ("L", "LA", "1"):
                gray = np.asarray(image.convert("L"), dtype=np.uint8)
                pixels = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError, struct.error) as e:
        raise ImageDecodeError(
            f"Malformed PNG stream near byte offset {stream.tell()} of {len(data)}: {e}") from e

    return rgb_from_array(pixels)


def encode_png(img: AnyImage) -> bytes:
    """Encode an image losslessly; gray images become single-channel PNGs (color type 0)."""
    buffer = BytesIO()
    Image.fromarray(img.pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def load_image(path: Union[str, Path]) -> RgbImage:
    """Read and decode a PNG file, naming the file on failure."""
    path = Path(path)
    try:
        return decode_png(path.read_bytes())
    except (OSError, ImageDecodeError) as e:
        raise ImageLoadError(f"Failed to load image {path}: {e}") from e


def to_grayscale(img: RgbImage) -> GrayImage:
    """Luma conversion, each pixel round(0.299R + 0.587G + 0.114B)."""
    rgb = img.pixels.astype(np.float64)
    luma = rgb[:, :, 0] * LUMA_WEIGHTS[0] + rgb[:, :, 1] * LUMA_WEIGHTS[1] + rgb[:, :, 2] * LUMA_WEIGHTS[2]
    return gray_from_array(np.clip(np.floor(luma + 0.5), 0, 255))


def resize_bilinear(img: AnyImage, out_w: int, out_h: int) -> AnyImage:
    """
    Bilinear resampling with edge clamping; returns the same image kind.

    Pixel centres are aligned (half-pixel convention) and each output sample
    blends its four nearest source pixels, whatever the scale factor. No
    antialiasing kernel is applied when shrinking.
    """
    validate_image_dimensions(out_w, out_h)
    if (out_w, out_h) == (img.width, img.height):
        return img
    rows = (np.arange(out_h) + 0.5) * (img.height / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (img.width / out_w) - 0.5
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"))

    source = img.pixels.astype(np.float64)
    if isinstance(img, GrayImage):
        values = ndimage.map_coordinates(source, coords, order=1, mode="nearest")
    else:
        values = np.stack([ndimage.map_coordinates(source[:, :, c], coords, order=1, mode="nearest")
                           for c in range(source.shape[2])], axis=-1)
    pixels = np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)
    return gray_from_array(pixels) if isinstance(img, GrayImage) else rgb_from_array(pixels)


def to_input_array(img: AnyImage, mode: str, size: int = INPUT_SIZE) -> Tensor:
    """
    Network input for one image: [channels, size, size] scaled into [0, 1].

    Canny mode takes a single channel; an RGB image is reduced to luma first.
    """
    if mode == "raw":
        if isinstance(img, GrayImage):
            raise ParameterError("Raw mode needs an RGB image")
        pixels = resize_bilinear(img, size, size).pixels.transpose(2, 0, 1)
    elif mode == "canny":
        gray = img if isinstance(img, GrayImage) else to_grayscale(img)
        pixels = resize_bilinear(gray, size, size).pixels[None, :, :]
    else:
        raise ParameterError(f"Unknown mode '{mode}'. Must be one of {list(MODES)}.")
    return pixels.astype(default_dtype()) / default_dtype()(255.0)


@handle_pipeline_errors("scan_dataset", "imagedata")
def scan_dataset(root: Union[str, Path], mode: str = "raw") -> DatasetIndex:
    """
    Catalogue every PNG under the two class directories of a corpus root.

    Raises:
        DatasetLayoutError: a class directory is missing
        EmptyClassError: a class directory holds no PNG files
    """
    root = Path(root)
    entries: List[DatasetEntry] = []
    for dir_name, label in sorted(CLASS_DIRS.items()):
        class_dir = root / dir_name
        if not class_dir.is_dir():
            raise DatasetLayoutError(f"Dataset root {root} has no '{dir_name}/' directory")
        files = sorted(p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png")
        if not files:
            raise EmptyClassError(f"Class directory {class_dir} contains no PNG files")
        entries.extend(DatasetEntry(path=p, label=label) for p in files)

    index = DatasetIndex(entries=tuple(entries), mode=mode, root=root)
    counts = index.counts
    logger.info(f"Scanned {len(index)} images ({mode}): "
                f"infected={counts[CellLabel.INFECTED]}, uninfected={counts[CellLabel.UNINFECTED]}")
    return index


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _positions_by_label(index: DatasetIndex) -> Dict[CellLabel, np.ndarray]:
    labels = index.labels
    return {label: np.flatnonzero(labels == int(label)) for label in CellLabel}


def stratified_split(index: DatasetIndex, test_fraction: float, seed: int) -> Tuple[DatasetIndex, DatasetIndex]:
    """
    Split each class independently after a seeded shuffle.

    Per-class test count is round(class_count * test_fraction). Both halves
    keep the index's original entry order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")

    rng = Rng(seed, _SPLIT_STREAM)
    test_positions = []
    for label, positions in _positions_by_label(index).items():
        if positions.size == 0:
            continue
        order = rng.derive(int(label)).permutation(positions.size)
        n_test = _round_half_up(positions.size * test_fraction)
        test_positions.extend(positions[order[:n_test]].tolist())

    is_test = np.zeros(len(index), dtype=bool)
    is_test[test_positions] = True
    train = index.with_entries([e for e, t in zip(index.entries, is_test) if not t])
    test = index.with_entries([e for e, t in zip(index.entries, is_test) if t])
    logger.info(f"Split {len(index)} images into train={len(train)}, test={len(test)} "
                f"(fraction={test_fraction}, seed={seed})")
    return train, test


def stratified_subset(index: DatasetIndex, total: int, seed: int) -> DatasetIndex:
    """Balanced, seeded subset of at most ``total`` images."""
    if total < 1:
        raise ParameterError(f"Subset size must be >= 1, got {total}")
    if total >= len(index):
        return index

    groups = _positions_by_label(index)
    per_class = total // len(groups)
    remainder = total - per_class * len(groups)
    rng = Rng(seed, _SUBSET_STREAM)
    chosen = []
    for i, (label, positions) in enumerate(groups.items()):
        quota = per_class + (1 if i < remainder else 0)
        order = rng.derive(int(label)).permutation(positions.size)
        chosen.extend(positions[order[:quota]].tolist())
    return index.with_entries([index.entries[i] for i in sorted(chosen)])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic visiting order for one epoch."""
    return Rng(seed, _SHUFFLE_STREAM, epoch).permutation(n)


def make_batches(
    index: DatasetIndex,
    batch_size: int,
    seed: int,
    epoch: int,
    threads: int = 1,
    min_last: int = 1,
    image_size: int = INPUT_SIZE,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """
    Yield the mini-batches of one epoch.

    The order is a seeded shuffle combined with the epoch ordinal (or index
    order when ``shuffle`` is false). The final short batch is kept unless it
    holds fewer than ``min_last`` images, in which case it is folded into the
    preceding batch. Image decoding may use ``threads`` workers; emission order
    never depends on the worker count.

    Raises:
        ImageLoadError: an indexed file cannot be read or decoded
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if threads < 1:
        raise ParameterError(f"threads must be >= 1, got {threads}")

    order = epoch_order(len(index), seed, epoch) if shuffle else np.arange(len(index))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_last:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])

    def load(entry: DatasetEntry) -> Tensor:
        return to_input_array(load_image(entry.path), index.mode, image_size)

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for chunk in chunks:
            entries = [index.entries[i] for i in chunk]
            arrays = list(executor.map(load, entries) if executor else map(load, entries))
            yield Batch(
                inputs=np.stack(arrays),
                targets=np.array([int(e.label) for e in entries], dtype=default_dtype()),
                paths=tuple(e.path for e in entries),
            )
    finally:
        if executor:
            executor.shutdown(wait=True)
