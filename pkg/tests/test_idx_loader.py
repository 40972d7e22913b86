import gzip
import struct

import numpy as np
import pytest

from blade_sim.exceptions import IdxFormatError
from blade_sim.idx_loader import load_idx, read_images, read_labels


def write_images(path, pixels, magic=0x00000803, count=None):
    n, rows, cols = pixels.shape
    header = struct.pack(">IIII", magic, n if count is None else count, rows, cols)
    path.write_bytes(header + pixels.astype(np.uint8).tobytes())
    return path


def write_labels(path, labels, magic=0x00000801):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + bytes(labels))
    return path


@pytest.fixture
def pixels():
    rng = np.random.default_rng(0)
    out = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    out[0, 0, 0] = 255
    out[0, 0, 1] = 0
    return out


def test_load_scales_and_flattens(tmp_path, pixels):
    images = write_images(tmp_path / "img.idx", pixels)
    labels = write_labels(tmp_path / "lbl.idx", list(range(10)))
    data = load_idx(images, labels)
    assert data.features.shape == (10, 784)
    assert data.features[0, 0] == 1.0 and data.features[0, 1] == 0.0
    assert data.features.min() >= 0.0 and data.features.max() <= 1.0
    np.testing.assert_array_equal(data.labels, np.arange(10))
    assert data.num_classes == 10


def test_gzip_is_transparent(tmp_path, pixels):
    raw = write_images(tmp_path / "img.idx", pixels).read_bytes()
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(raw))
    np.testing.assert_array_equal(read_images(gz), read_images(tmp_path / "img.idx"))


@pytest.mark.parametrize("reader,writer", [
    (read_images, lambda p: write_images(p, np.zeros((2, 2, 2)), magic=0x00000801)),
    (read_labels, lambda p: write_labels(p, [1, 2], magic=0x00000803)),
])
def test_bad_magic(tmp_path, reader, writer):
    path = writer(tmp_path / "bad.idx")
    with pytest.raises(IdxFormatError) as err:
        reader(path)
    assert err.value.code == "BAD_MAGIC"


def test_truncated_pixels(tmp_path, pixels):
    path = write_images(tmp_path / "img.idx", pixels, count=11)
    with pytest.raises(IdxFormatError) as err:
        read_images(path)
    assert err.value.code == "TRUNCATED"


def test_truncated_header(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(b"\x00\x00\x08")
    with pytest.raises(IdxFormatError) as err:
        read_labels(path)
    assert err.value.code == "TRUNCATED"


def test_count_mismatch(tmp_path, pixels):
    images = write_images(tmp_path / "img.idx", pixels)
    labels = write_labels(tmp_path / "lbl.idx", [0, 1, 2])
    with pytest.raises(IdxFormatError) as err:
        load_idx(images, labels)
    assert err.value.code == "COUNT_MISMATCH"


def test_missing_file(tmp_path):
    with pytest.raises(IdxFormatError) as err:
        read_images(tmp_path / "nope.idx")
    assert err.value.code == "NOT_FOUND"
