import logging
import sys
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, field_validator
from tqdm import tqdm

from src.dataio.dataset import Dataset
from src.errors import EmptyDatasetError, FingerprintMismatchError, RejectedInputError
from src.network.mlp import ForwardTrace, Mlp, augment_input, forward_trace
from src.network.persistence import mlp_fingerprint

logger = logging.getLogger(__name__)

DEFAULT_DEGENERACY_THRESHOLD = 1e-12


class Fingerprint(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_sha256: bytes = Field(default=bytes(32), min_length=32, max_length=32)
    dataset_sha256: bytes = Field(default=bytes(32), min_length=32, max_length=32)
    sample_count: NonNegativeInt = 0


class PatternSet(BaseModel):
    """Per layer a matrix of shape ``[fan_in + 1, fan_out]`` whose column j is the pattern of neuron j."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layers: List[np.ndarray]
    degenerate: List[np.ndarray]
    fingerprint: Fingerprint = Fingerprint()

    @field_validator("layers", mode="before")
    @classmethod
    def _frozen_layers(cls, value):
        frozen = []
        for matrix in value:
            matrix = np.array(matrix, dtype=np.float64)
            if matrix.ndim != 2 or not np.all(np.isfinite(matrix)):
                raise ValueError("pattern matrices must be finite 2-D arrays")
            matrix.setflags(write=False)
            frozen.append(matrix)
        return frozen

    @field_validator("degenerate", mode="before")
    @classmethod
    def _frozen_flags(cls, value):
        frozen = []
        for flags in value:
            flags = np.array(flags, dtype=bool)
            flags.setflags(write=False)
            frozen.append(flags)
        return frozen

    @property
    def degenerate_count(self) -> int:
        return int(sum(flags.sum() for flags in self.degenerate))

    def layout(self) -> List[Tuple[int, int]]:
        return [matrix.shape for matrix in self.layers]


class MomentAccumulator:
    """Running sums ``sum_n x'_n z_nj`` and ``sum_n z_nj^2`` per layer, over augmented layer inputs ``x'``."""

    def __init__(self, layout: List[Tuple[int, int]]):
        self.cross_moments = [np.zeros(shape) for shape in layout]
        self.z_squares = [np.zeros(shape[1]) for shape in layout]
        self.sample_count = 0

    @classmethod
    def empty(cls, mlp: Mlp) -> "MomentAccumulator":
        return cls([(layer.fan_in + 1, layer.fan_out) for layer in mlp.layers])

    def layout(self) -> List[Tuple[int, int]]:
        return [cross.shape for cross in self.cross_moments]


def accumulate(acc: MomentAccumulator, trace: ForwardTrace) -> MomentAccumulator:
    """Adds one sample (or a batch) to ``acc`` in place and returns it."""
    if len(trace.pre_activations) != len(acc.cross_moments):
        raise RejectedInputError(f"trace has {len(trace.pre_activations)} layers, accumulator {len(acc.cross_moments)}")
    for k, z in enumerate(trace.pre_activations):
        x_aug = augment_input(trace.layer_input(k))
        if x_aug.shape[-1] != acc.cross_moments[k].shape[0] or z.shape[-1] != acc.cross_moments[k].shape[1]:
            raise RejectedInputError(f"layer {k}: trace shapes do not match accumulator {acc.cross_moments[k].shape}")
        if trace.is_batch:
            acc.cross_moments[k] += x_aug.T @ z
            acc.z_squares[k] += np.square(z).sum(axis=0)
        else:
            acc.cross_moments[k] += np.outer(x_aug, z)
            acc.z_squares[k] += np.square(z)
    acc.sample_count += trace.inputs.shape[0] if trace.is_batch else 1
    return acc


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    if a.layout() != b.layout():
        raise RejectedInputError(f"cannot merge accumulators with layouts {a.layout()} and {b.layout()}")
    merged = MomentAccumulator(a.layout())
    merged.cross_moments = [x + y for x, y in zip(a.cross_moments, b.cross_moments)]
    merged.z_squares = [x + y for x, y in zip(a.z_squares, b.z_squares)]
    merged.sample_count = a.sample_count + b.sample_count
    return merged


def finalize(acc: MomentAccumulator, degeneracy_threshold: float = DEFAULT_DEGENERACY_THRESHOLD,
             fingerprint: Fingerprint = Fingerprint()) -> PatternSet:
    """Per neuron ``a = (w'XX'w)^-1 w'XX'``, i.e. cross moment over summed squared output.

    Neurons whose summed squared output does not exceed ``threshold * count``
    get a zero pattern and a degenerate flag.
    """
    if acc.sample_count == 0:
        raise EmptyDatasetError("cannot finalize patterns from zero samples")
    layers, flags = [], []
    for k, (cross, z_sq) in enumerate(zip(acc.cross_moments, acc.z_squares)):
        degenerate = z_sq <= degeneracy_threshold * acc.sample_count
        safe = np.where(degenerate, 1.0, z_sq)
        pattern = np.where(degenerate[None, :], 0.0, cross / safe[None, :])
        layers.append(pattern)
        flags.append(degenerate)
        if degenerate.any():
            logger.info(f"Layer {k}: {int(degenerate.sum())} of {degenerate.size} neurons are degenerate")
    return PatternSet(layers=layers, degenerate=flags, fingerprint=fingerprint)


def estimate_patterns(mlp: Mlp, dataset: Dataset, batch_size: int = 1024,
                      degeneracy_threshold: float = DEFAULT_DEGENERACY_THRESHOLD) -> PatternSet:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot estimate patterns on an empty dataset")
    acc = MomentAccumulator.empty(mlp)
    starts = range(0, len(dataset), batch_size)
    for start in tqdm(starts, desc="Estimating patterns", unit="batch", disable=not sys.stderr.isatty()):
        accumulate(acc, forward_trace(mlp, dataset.images[start:start + batch_size]))

    fingerprint = Fingerprint(
        model_sha256=mlp_fingerprint(mlp),
        dataset_sha256=dataset.fingerprint(),
        sample_count=acc.sample_count,
    )
    patterns = finalize(acc, degeneracy_threshold, fingerprint)
    logger.info(f"Estimated patterns from {acc.sample_count} samples ({patterns.degenerate_count} degenerate neurons)")
    return patterns


def check_fingerprint(patterns: PatternSet, model_sha256: bytes, dataset_sha256: Optional[bytes] = None) -> None:
    """Raises when a pattern set was estimated for another model (or, if given, another dataset)."""
    if patterns.fingerprint.model_sha256 != model_sha256:
        raise FingerprintMismatchError("pattern set was estimated for a different model")
    if dataset_sha256 is not None and patterns.fingerprint.dataset_sha256 != dataset_sha256:
        raise FingerprintMismatchError("pattern set was estimated on a different dataset")
