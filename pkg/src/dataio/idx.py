import logging
import os
import struct
from typing import NamedTuple

import numpy as np

from src.errors import (
    ArtifactMissingError,
    EmptyDatasetError,
    IdxDimensionError,
    IdxLabelRangeError,
    IdxMagicError,
    IdxTruncatedError,
)

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
# Anything beyond this is not an image file we can hold in memory.
MAX_IDX_VALUES = 2 ** 34


class RawImages(NamedTuple):
    pixels: np.ndarray  # uint8 [N x rows*cols]
    rows: int
    cols: int


def _read_file(path: str) -> bytes:
    if not os.path.exists(path):
        raise ArtifactMissingError(f"File not found: {path}")
    with open(path, "rb") as f:
        return f.read()


def _unpack_header(data: bytes, n_fields: int, path: str) -> tuple:
    size = 4 * n_fields
    if len(data) < size:
        raise IdxTruncatedError(f"{path}: header needs {size} bytes, file has {len(data)}")
    return struct.unpack(f">{n_fields}I", data[:size])


def _check_payload(data: bytes, offset: int, expected: int, path: str) -> bytes:
    payload = data[offset:]
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise IdxDimensionError(f"{path}: {len(payload) - expected} trailing bytes after the declared payload")
    return payload


def load_idx_images(path: str) -> RawImages:
    """Parses an IDX3 image file (big-endian header, one unsigned byte per pixel)."""
    data = _read_file(path)
    magic, count, rows, cols = _unpack_header(data, 4, path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x} is not an image file (expected 0x{IDX_IMAGE_MAGIC:08x})")
    if count == 0:
        raise EmptyDatasetError(f"{path}: file declares zero images")
    if rows == 0 or cols == 0 or count * rows * cols > MAX_IDX_VALUES:
        raise IdxDimensionError(f"{path}: implausible dimensions {count}x{rows}x{cols}")

    payload = _check_payload(data, 16, count * rows * cols, path)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    logger.info(f"Loaded {count} images of {rows}x{cols} from {path}")
    return RawImages(pixels=pixels, rows=rows, cols=cols)


def load_idx_labels(path: str, num_classes: int = 10) -> np.ndarray:
    data = _read_file(path)
    magic, count = _unpack_header(data, 2, path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x} is not a label file (expected 0x{IDX_LABEL_MAGIC:08x})")
    if count == 0:
        raise EmptyDatasetError(f"{path}: file declares zero labels")

    payload = _check_payload(data, 8, count, path)
    labels = np.frombuffer(payload, dtype=np.uint8)
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IdxLabelRangeError(f"{path}: label {labels[bad]} at position {bad} is outside 0..{num_classes - 1}")
    logger.info(f"Loaded {count} labels from {path}")
    return labels.astype(np.int64)


def write_idx_images(path: str, pixels: np.ndarray) -> None:
    """Writes ``[N x rows x cols]`` uint8 pixels as an IDX3 file."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(pixels.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())
