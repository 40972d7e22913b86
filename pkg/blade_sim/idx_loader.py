"""
IDX (MNIST / Fashion-MNIST) ingestion.

Images: big-endian magic 0x00000803, count, rows, cols, then uint8 pixels.
Labels: big-endian magic 0x00000801, count, then uint8 labels.
Files ending in ``.gz`` are decompressed transparently.
"""
import gzip
import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import IdxFormatError
from .mlcore import Dataset

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.exists():
        raise IdxFormatError(f"IDX file not found: {path}", code="NOT_FOUND")
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, fmt: str, path) -> tuple:
    size = struct.calcsize(fmt)
    if len(raw) < size:
        raise IdxFormatError(f"{path}: header truncated", code="TRUNCATED")
    return struct.unpack(fmt, raw[:size])


def read_images(path: Union[str, Path]) -> np.ndarray:
    raw = _read(path)
    magic, count, rows, cols = _header(raw, ">IIII", path)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
                             code="BAD_MAGIC")
    expected = count * rows * cols
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if pixels.size < expected:
        raise IdxFormatError(f"{path}: {pixels.size} pixel bytes, header promises {expected}",
                             code="TRUNCATED")
    return pixels[:expected].reshape(count, rows * cols)


def read_labels(path: Union[str, Path]) -> np.ndarray:
    raw = _read(path)
    magic, count = _header(raw, ">II", path)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
                             code="BAD_MAGIC")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.size < count:
        raise IdxFormatError(f"{path}: {labels.size} labels, header promises {count}",
                             code="TRUNCATED")
    return labels[:count].astype(np.int64)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             num_classes: Optional[int] = None) -> Dataset:
    """Pixels scaled to [0, 1]; image and label counts must agree"""
    pixels = read_images(images_path)
    labels = read_labels(labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{pixels.shape[0]} images but {labels.shape[0]} labels",
                             code="COUNT_MISMATCH")
    classes = num_classes or max(10, int(labels.max()) + 1)
    logger.info(f"Loaded {pixels.shape[0]} IDX samples ({pixels.shape[1]} dims) "
                f"from {images_path}")
    return Dataset(pixels.astype(np.float64) / 255.0, labels, client_id=-1, num_classes=classes)
