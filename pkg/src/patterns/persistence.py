"""DTDP pattern files.

Layout (little endian): magic ``DTDP``, u32 version, u32 layer count, then per
layer u32 fan_out, u32 fan_in+1, the pattern matrix column-major as f64 (one
neuron's pattern after the other), and the degenerate-neuron bitmap (one bit
per neuron, little bit order, padded to whole bytes). A trailer follows the
last layer: 32-byte model hash, 32-byte dataset hash, u64 sample count.
"""
import logging
import os
import struct

import numpy as np

from src.errors import ArtifactMissingError, PatternFormatError
from src.network.persistence import write_atomic
from src.patterns.moments import Fingerprint, PatternSet

logger = logging.getLogger(__name__)

PATTERN_MAGIC = b"DTDP"
PATTERN_VERSION = 1


def patterns_to_bytes(patterns: PatternSet) -> bytes:
    parts = [PATTERN_MAGIC, struct.pack("<II", PATTERN_VERSION, len(patterns.layers))]
    for matrix, flags in zip(patterns.layers, patterns.degenerate):
        fan_in_aug, fan_out = matrix.shape
        parts.append(struct.pack("<II", fan_out, fan_in_aug))
        parts.append(matrix.astype("<f8").ravel(order="F").tobytes())
        parts.append(np.packbits(flags, bitorder="little").tobytes())
    fingerprint = patterns.fingerprint
    parts.append(fingerprint.model_sha256 + fingerprint.dataset_sha256)
    parts.append(struct.pack("<Q", fingerprint.sample_count))
    return b"".join(parts)


def patterns_from_bytes(data: bytes) -> PatternSet:
    offset = 0

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise PatternFormatError(f"pattern file truncated while reading {what}")
        chunk = data[offset:offset + size]
        offset += size
        return chunk

    if take(4, "magic") != PATTERN_MAGIC:
        raise PatternFormatError("not a DTDP pattern file (bad magic)")
    version, layer_count = struct.unpack("<II", take(8, "header"))
    if version != PATTERN_VERSION:
        raise PatternFormatError(f"unsupported DTDP version {version}")

    layers, flags = [], []
    for k in range(layer_count):
        fan_out, fan_in_aug = struct.unpack("<II", take(8, f"layer {k} header"))
        values = np.frombuffer(take(8 * fan_out * fan_in_aug, f"layer {k} patterns"), dtype="<f8")
        layers.append(values.astype(np.float64).reshape((fan_in_aug, fan_out), order="F"))
        bitmap = np.frombuffer(take((fan_out + 7) // 8, f"layer {k} bitmap"), dtype=np.uint8)
        flags.append(np.unpackbits(bitmap, count=fan_out, bitorder="little").astype(bool))

    model_sha256 = take(32, "model hash")
    dataset_sha256 = take(32, "dataset hash")
    (sample_count,) = struct.unpack("<Q", take(8, "sample count"))
    if offset != len(data):
        raise PatternFormatError(f"{len(data) - offset} trailing bytes after the fingerprint")

    fingerprint = Fingerprint(model_sha256=model_sha256, dataset_sha256=dataset_sha256, sample_count=sample_count)
    try:
        return PatternSet(layers=layers, degenerate=flags, fingerprint=fingerprint)
    except ValueError as e:
        raise PatternFormatError(f"pattern file holds invalid values: {e}") from e


def save_patterns(patterns: PatternSet, path: str) -> None:
    write_atomic(path, patterns_to_bytes(patterns))
    logger.info(f"Saved patterns for {len(patterns.layers)} layers to {path}")


def load_patterns(path: str) -> PatternSet:
    if not os.path.exists(path):
        raise ArtifactMissingError(f"Pattern file not found: {path}")
    with open(path, "rb") as f:
        return patterns_from_bytes(f.read())
