import os
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

# Add the parent directory to sys.path to import cellscan and src
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.tensorcore import precision  # noqa: E402

TOY_SIZE = 64


def save_png(path, pixels):
    """Write a uint8 array ([H, W] or [H, W, 3]) as a PNG file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format='PNG')
    return path


def disk_image(rng, size=TOY_SIZE):
    """Light noisy field with one solid dark disk."""
    field = 220 + rng.integers(-8, 9, size=(size, size))
    radius = rng.integers(size // 6, size // 4 + 1)
    cy, cx = rng.integers(radius + 2, size - radius - 2, size=2)
    yy, xx = np.mgrid[:size, :size]
    field[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = 40
    return np.repeat(field[:, :, None], 3, axis=2).astype(np.uint8)


def blank_image(rng, size=TOY_SIZE):
    """Light noisy field without any structure."""
    field = 220 + rng.integers(-8, 9, size=(size, size))
    return np.repeat(field[:, :, None], 3, axis=2).astype(np.uint8)


def white_square_image(size=TOY_SIZE, side=24):
    """White square centred on a black background."""
    pixels = np.zeros((size, size, 3), dtype=np.uint8)
    start = (size - side) // 2
    pixels[start:start + side, start:start + side] = 255
    return pixels


def make_toy_corpus(root, per_class=100, seed=1234, size=TOY_SIZE):
    """Disks are 'Parasitized', blank fields 'Uninfected'."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for i in range(per_class):
        save_png(root / 'Parasitized' / f'disk_{i:03d}.png', disk_image(rng, size))
        save_png(root / 'Uninfected' / f'blank_{i:03d}.png', blank_image(rng, size))
    return root


@pytest.fixture
def float64():
    """Run the test with the 64-bit working dtype."""
    with precision('float64'):
        yield


@pytest.fixture(scope='session')
def toy_corpus(tmp_path_factory):
    """200-image disks-vs-blanks corpus shared by the training tests."""
    return make_toy_corpus(tmp_path_factory.mktemp('toy') / 'cells')


@pytest.fixture
def small_corpus(tmp_path):
    """Six images per class with uneven sizes, as the real corpus has."""
    rng = np.random.default_rng(7)
    root = tmp_path / 'cells'
    for i in range(6):
        size = 40 + 4 * i
        save_png(root / 'Parasitized' / f'p_{i}.png', disk_image(rng, size))
        save_png(root / 'Uninfected' / f'u_{i}.png', blank_image(rng, size))
    return root


@pytest.fixture
def nih_root():
    """Root of the NIH cell corpus; tests needing it are skipped when absent."""
    root = os.environ.get('CELLSCAN_NIH_ROOT')
    if not root or not Path(root).is_dir():
        pytest.skip('CELLSCAN_NIH_ROOT not set to the cell corpus directory')
    return Path(root)
