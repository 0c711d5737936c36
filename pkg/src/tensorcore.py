"""
Dense tensor helpers and the pinned random generator.

Tensors are plain row-major numpy arrays of the working dtype (float32 by
default, float64 for verification runs). Operations here check shapes
strictly: there is no broadcasting.
"""

import contextlib
import math
import os
from typing import Iterator, Sequence

import numpy as np
import numpy.typing as npt

from src.core import NumericError, ParameterError, ShapeError, get_logger

logger = get_logger(__name__, 'tensorcore')

Tensor = npt.NDArray[np.floating]

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}

_default_dtype = _DTYPES.get(os.environ.get("CELLSCAN_PRECISION", "float32"), np.float32)


def default_dtype() -> type:
    """Return the working floating-point dtype."""
    return _default_dtype


def set_default_dtype(name: str) -> None:
    """Select the working dtype by name ("float32" or "float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ParameterError(f"Unknown precision '{name}'. Must be one of {sorted(_DTYPES)}.")
    _default_dtype = _DTYPES[name]
    logger.debug(f"Working precision set to {name}")


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the working dtype."""
    previous = np.dtype(_default_dtype).name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Rng:
    """
    Seeded random stream.

    Backed by numpy's PCG64 bit generator fed through ``SeedSequence``. The
    raw bit stream is fixed for a seed, but numpy may change how ``random``
    and ``permutation`` consume it between feature releases, so runs repeat
    exactly only under the same numpy version (reports record it). ``derive``
    gives independent child streams keyed by integers (epoch ordinal, stream id).
    """

    def __init__(self, seed: int, *keys: int):
        if seed < 0 or any(key < 0 for key in keys):
            raise ParameterError(f"Seeds must be non-negative, got {seed} {keys}")
        self.seed = int(seed)
        self.keys = tuple(int(key) for key in keys)
        self._generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys]))
        )

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def random(self, shape: Sequence[int], dtype=None) -> Tensor:
        """Uniform samples on [0, 1)."""
        return self._generator.random(tuple(shape), dtype=dtype or default_dtype())

    def uniform(self, low: float, high: float, shape: Sequence[int], dtype=None) -> Tensor:
        dtype = dtype or default_dtype()
        unit = self._generator.random(tuple(shape), dtype=np.float64)
        return (low + (high - low) * unit).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"


def _check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(dim) for dim in shape)
    if not shape:
        raise ShapeError("Shape must have at least one dimension")
    if any(dim < 1 for dim in shape):
        raise ShapeError(f"Every dimension must be >= 1, got {list(shape)}")
    return shape


def _check_finite(t: Tensor, operation: str) -> Tensor:
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{operation} produced non-finite values")
    return t


def zeros(shape: Sequence[int], dtype=None) -> Tensor:
    """Tensor of the given shape filled with exact zeros."""
    return np.zeros(_check_shape(shape), dtype=dtype or default_dtype())


def zip_map(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise add, sub or mul of two tensors with identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"zip_map shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    ops = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
    if op not in ops:
        raise ParameterError(f"Unknown elementwise op '{op}'. Must be one of {sorted(ops)}.")
    return _check_finite(ops[op](a, b), f"zip_map[{op}]")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [m, k] and [k, n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 tensors, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    return _check_finite(a @ b, "matmul")


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    """Relabel the shape of a tensor without moving data."""
    new_shape = _check_shape(new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"Cannot reshape {list(t.shape)} ({t.size} elements) to {list(new_shape)}")
    return np.reshape(t, new_shape)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    if fan_in < 1 or fan_out < 1:
        raise ParameterError(f"Fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_uniform(rng: Rng, shape: Sequence[int], fan_in: int, fan_out: int) -> Tensor:
    """Glorot/Xavier uniform initialisation on [-sqrt(6/(in+out)), +sqrt(6/(in+out))]."""
    limit = glorot_bound(fan_in, fan_out)
    return rng.uniform(-limit, limit, _check_shape(shape))
