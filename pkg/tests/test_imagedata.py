from io import BytesIO
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import save_png
from src.core import (
    DatasetLayoutError,
    EmptyClassError,
    ImageDecodeError,
    ImageLoadError,
    ParameterError,
    UnsupportedFormatError,
)
from src.imagedata import (
    CellLabel,
    DatasetEntry,
    DatasetIndex,
    GrayImage,
    decode_png,
    encode_png,
    gray_from_array,
    load_image,
    make_batches,
    resize_bilinear,
    rgb_from_array,
    scan_dataset,
    stratified_split,
    stratified_subset,
    to_grayscale,
    to_input_array,
)


def _png_bytes(pixels, mode=None):
    buffer = BytesIO()
    image = Image.fromarray(pixels) if mode is None else Image.fromarray(pixels).convert(mode)
    image.save(buffer, format='PNG')
    return buffer.getvalue()


def _fake_index(per_class, mode='raw'):
    """Catalogue of paths that are never opened."""
    entries = [DatasetEntry(Path(f'Parasitized/p{i:03d}.png'), CellLabel.INFECTED) for i in range(per_class)]
    entries += [DatasetEntry(Path(f'Uninfected/u{i:03d}.png'), CellLabel.UNINFECTED) for i in range(per_class)]
    return DatasetIndex(entries=tuple(entries), mode=mode)


def test_decode_single_white_pixel():
    """1x1 white PNG decodes to one white RGB pixel."""
    img = decode_png(_png_bytes(np.full((1, 1, 3), 255, dtype=np.uint8)))
    assert (img.width, img.height) == (1, 1)
    assert img.pixels.reshape(-1).tolist() == [255, 255, 255]


def test_decode_expands_gray_and_drops_alpha():
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    img = decode_png(_png_bytes(gray))
    assert img.pixels.shape == (3, 4, 3)
    assert np.array_equal(img.pixels[:, :, 0], gray)
    assert np.array_equal(img.pixels[:, :, 2], gray)

    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[..., 0] = 200
    rgba[..., 3] = 10
    img = decode_png(_png_bytes(rgba))
    assert img.pixels[0, 0].tolist() == [200, 0, 0]


def test_decode_rejects_sixteen_bit():
    """16-bit PNGs are refused rather than silently truncated."""
    deep = (np.arange(16, dtype=np.uint16).reshape(4, 4) * 4000)
    with pytest.raises(UnsupportedFormatError):
        decode_png(_png_bytes(deep))


def test_decode_truncated_stream():
    data = _png_bytes(np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8))
    with pytest.raises(ImageDecodeError) as excinfo:
        decode_png(data[:len(data) // 2])
    assert 'offset' in str(excinfo.value)


def test_decode_bad_signature():
    with pytest.raises(ImageDecodeError) as excinfo:
        decode_png(b'GIF89a' + b'\x00' * 40)
    assert 'offset 0' in str(excinfo.value)


def test_encode_round_trip_rgb_and_gray():
    """decode(encode(img)) reproduces the pixels exactly."""
    rng = np.random.default_rng(1)
    rgb = rgb_from_array(rng.integers(0, 256, (9, 7, 3)))
    assert np.array_equal(decode_png(encode_png(rgb)).pixels, rgb.pixels)

    gray = gray_from_array(rng.integers(0, 256, (5, 6)))
    decoded = decode_png(encode_png(gray))
    assert np.array_equal(decoded.pixels[:, :, 1], gray.pixels)


def test_gray_encodes_single_channel_and_smaller():
    """Gray images are color type 0 and encode smaller than the RGB equivalent."""
    gray = gray_from_array(np.zeros((64, 64)))
    data = encode_png(gray)
    assert data[25] == 0  # IHDR color type
    rgb = rgb_from_array(np.zeros((64, 64, 3)))
    assert len(data) < len(encode_png(rgb))


def test_to_grayscale_reference_values():
    pixels = np.array([[[255, 255, 255], [255, 0, 0], [0, 0, 0]]], dtype=np.uint8)
    gray = to_grayscale(rgb_from_array(pixels))
    assert isinstance(gray, GrayImage)
    assert gray.pixels.tolist() == [[255, 76, 0]]


def test_resize_constant_stays_constant():
    img = rgb_from_array(np.full((37, 53, 3), 128))
    out = resize_bilinear(img, 64, 64)
    assert (out.width, out.height) == (64, 64)
    assert np.all(out.pixels == 128)


def test_resize_identity_and_monotone_upscale():
    img = gray_from_array(np.array([[0, 255]]))
    assert np.array_equal(resize_bilinear(img, 2, 1).pixels, img.pixels)
    row = resize_bilinear(img, 4, 1).pixels[0].astype(int)
    assert np.all(np.diff(row) >= 0)
    assert row[0] == 0 and row[-1] == 255


def test_resize_stays_within_input_range():
    rng = np.random.default_rng(2)
    img = gray_from_array(rng.integers(30, 200, (50, 41)))
    out = resize_bilinear(img, 64, 64).pixels
    assert out.min() >= 30 and out.max() <= 199


def test_resize_downscale_samples_nearest_pixels_only():
    """Shrinking 8 -> 2 samples source positions 1.5 and 5.5; the bright last pixel is never reached."""
    img = gray_from_array(np.array([[0, 0, 0, 0, 0, 0, 0, 255]]))
    assert resize_bilinear(img, 2, 1).pixels.tolist() == [[0, 0]]

    ramp = gray_from_array(np.array([[0, 0, 0, 255, 255, 255]]))
    assert resize_bilinear(ramp, 3, 1).pixels.tolist() == [[0, 128, 255]]


def test_resize_rejects_zero_dimension():
    with pytest.raises(ParameterError):
        resize_bilinear(gray_from_array(np.zeros((4, 4))), 0, 4)


def test_to_input_array_shapes_and_scale():
    img = rgb_from_array(np.full((10, 12, 3), 255))
    raw = to_input_array(img, 'raw')
    assert raw.shape == (3, 64, 64)
    assert raw.max() == 1.0 and raw.min() == 1.0
    assert to_input_array(img, 'canny').shape == (1, 64, 64)
    with pytest.raises(ParameterError):
        to_input_array(img, 'sepia')


def test_scan_dataset_counts_and_order(small_corpus):
    (small_corpus / 'Uninfected' / 'notes.txt').write_text('ignored')
    index = scan_dataset(small_corpus)
    assert len(index) == 12
    assert index.counts == {CellLabel.INFECTED: 6, CellLabel.UNINFECTED: 6}
    paths = [e.path for e in index.entries]
    assert paths == sorted(paths)


def test_scan_dataset_missing_class_directory(tmp_path):
    save_png(tmp_path / 'Parasitized' / 'a.png', np.zeros((4, 4, 3)))
    with pytest.raises(DatasetLayoutError):
        scan_dataset(tmp_path)


def test_scan_dataset_empty_class(tmp_path):
    save_png(tmp_path / 'Parasitized' / 'a.png', np.zeros((4, 4, 3)))
    (tmp_path / 'Uninfected').mkdir()
    with pytest.raises(EmptyClassError):
        scan_dataset(tmp_path)


def test_stratified_split_counts():
    """100+100 at 0.2 gives 80+80 train and 20+20 test."""
    train, test = stratified_split(_fake_index(100), 0.2, seed=42)
    assert train.counts == {CellLabel.INFECTED: 80, CellLabel.UNINFECTED: 80}
    assert test.counts == {CellLabel.INFECTED: 20, CellLabel.UNINFECTED: 20}


def test_stratified_split_partitions_and_is_deterministic():
    index = _fake_index(25)
    train, test = stratified_split(index, 0.3, seed=42)
    again_train, again_test = stratified_split(index, 0.3, seed=42)
    assert train.entries == again_train.entries and test.entries == again_test.entries

    assert set(train.entries).isdisjoint(test.entries)
    assert set(train.entries) | set(test.entries) == set(index.entries)
    # round(25 * 0.3) = round(7.5) = 8 per class
    assert test.counts[CellLabel.INFECTED] == 8

    other_train, _ = stratified_split(index, 0.3, seed=43)
    assert other_train.entries != train.entries


@pytest.mark.parametrize('fraction', [0.0, 1.0, 1.5, -0.1])
def test_stratified_split_rejects_fraction(fraction):
    with pytest.raises(ParameterError):
        stratified_split(_fake_index(4), fraction, seed=1)


def test_stratified_subset_is_balanced():
    subset = stratified_subset(_fake_index(100), 30, seed=42)
    assert len(subset) == 30
    assert subset.counts[CellLabel.INFECTED] == 15
    assert stratified_subset(_fake_index(5), 30, seed=42) == _fake_index(5)


def test_make_batches_sizes_and_coverage(small_corpus):
    """10 entries in batches of 4 give 4, 4, 2 and visit every image once."""
    index = scan_dataset(small_corpus)
    index = index.with_entries(index.entries[:10])
    batches = list(make_batches(index, 4, seed=42, epoch=1))
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = [p for b in batches for p in b.paths]
    assert sorted(seen) == sorted(e.path for e in index.entries)
    for b in batches:
        assert b.inputs.shape[1:] == (3, 64, 64)
        assert b.inputs.min() >= 0.0 and b.inputs.max() <= 1.0
        assert set(np.unique(b.targets).tolist()) <= {0.0, 1.0}


@pytest.mark.parametrize('count, batch, expected_sizes', [
    (5, 4, [5]),
    (9, 4, [4, 5]),
    (10, 3, [3, 3, 4]),
    (10, 4, [4, 4, 2]),
])
def test_make_batches_min_last_folds_short_tail(small_corpus, count, batch, expected_sizes):
    """Folding the tail keeps every entry exactly once."""
    index = scan_dataset(small_corpus)
    index = index.with_entries(index.entries[:count])
    batches = list(make_batches(index, batch, seed=1, epoch=1, min_last=2))
    assert [len(b) for b in batches] == expected_sizes
    seen = [p for b in batches for p in b.paths]
    assert len(seen) == len(set(seen)) == count
    assert set(seen) == {e.path for e in index.entries}


def test_make_batches_order_depends_on_seed_and_epoch(small_corpus):
    index = scan_dataset(small_corpus)

    def order(seed, epoch, threads=1):
        return [p for b in make_batches(index, 5, seed, epoch, threads=threads) for p in b.paths]

    assert order(42, 1) == order(42, 1)
    assert order(42, 1) != order(42, 2)
    # worker count never changes the emission order
    assert order(42, 3) == order(42, 3, threads=4)


def test_make_batches_canny_mode_single_channel(small_corpus):
    index = scan_dataset(small_corpus, mode='canny')
    batch = next(make_batches(index, 3, seed=0, epoch=1))
    assert batch.inputs.shape == (3, 1, 64, 64)


def test_make_batches_unreadable_file_names_it(small_corpus):
    index = scan_dataset(small_corpus)
    broken = index.entries[0].path
    broken.write_bytes(b'\x89PNG\r\n\x1a\n garbage')
    with pytest.raises(ImageLoadError) as excinfo:
        list(make_batches(index, 4, seed=0, epoch=1, shuffle=False))
    assert broken.name in str(excinfo.value)


def test_load_image_missing_file(tmp_path):
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / 'missing.png')
