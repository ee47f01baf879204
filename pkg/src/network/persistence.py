"""DTDN model files.

Layout (little endian): magic ``DTDN``, u32 version, u32 layer count, then per
layer u32 fan_out, u32 fan_in, u32 activation code, fan_out*fan_in f64 weights
(row-major) and fan_out f64 biases.
"""
import hashlib
import logging
import os
import struct

import numpy as np
from pydantic import ValidationError

from src.errors import ArtifactMissingError, ModelFormatError
from src.network.mlp import Activation, DenseLayer, Mlp

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"DTDN"
MODEL_VERSION = 1


def mlp_to_bytes(mlp: Mlp) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(mlp.layers))]
    for layer in mlp.layers:
        parts.append(struct.pack("<III", layer.fan_out, layer.fan_in, layer.activation.code))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise ModelFormatError(f"model file truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, count: int, what: str) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def mlp_from_bytes(data: bytes) -> Mlp:
    reader = _Reader(data)
    if reader.take(4, "magic") != MODEL_MAGIC:
        raise ModelFormatError("not a DTDN model file (bad magic)")
    version, layer_count = reader.u32(2, "header")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported DTDN version {version}")
    if layer_count == 0:
        raise ModelFormatError("model file declares zero layers")

    layers = []
    for k in range(layer_count):
        fan_out, fan_in, code = reader.u32(3, f"layer {k} header")
        try:
            activation = Activation.from_code(code)
        except ValueError as e:
            raise ModelFormatError(f"layer {k}: {e}") from e
        weights = reader.f64(fan_out * fan_in, f"layer {k} weights").reshape(fan_out, fan_in)
        bias = reader.f64(fan_out, f"layer {k} bias")
        layers.append((weights, bias, activation))
    if reader.offset != len(data):
        raise ModelFormatError(f"{len(data) - reader.offset} trailing bytes after the last layer")

    try:
        return Mlp.from_layers([DenseLayer(weights=w, bias=b, activation=a) for w, b, a in layers])
    except ValidationError as e:
        raise ModelFormatError(f"model file describes an inconsistent network: {e}") from e


def mlp_fingerprint(mlp: Mlp) -> bytes:
    return hashlib.sha256(mlp_to_bytes(mlp)).digest()


def write_atomic(path: str, data: bytes) -> None:
    """Writes ``data`` to a sibling temp file, then renames it over ``path``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(data)
    os.replace(tmp_path, path)


def save_mlp(mlp: Mlp, path: str) -> None:
    write_atomic(path, mlp_to_bytes(mlp))
    logger.info(f"Saved model {mlp.layer_sizes} to {path}")


def load_mlp(path: str) -> Mlp:
    if not os.path.exists(path):
        raise ArtifactMissingError(f"Model file not found: {path}")
    with open(path, "rb") as f:
        return mlp_from_bytes(f.read())
