import hashlib
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, field_validator, model_validator

from src.dataio.idx import load_idx_images, load_idx_labels
from src.errors import DataFormatError, EmptyDatasetError, RejectedInputError

logger = logging.getLogger(__name__)

SEED_MAX = 2 ** 64 - 1


def _frozen_images(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"images must be [N x D], got shape {array.shape}")
    array.setflags(write=False)
    return array


def _frozen_labels(value) -> np.ndarray:
    array = np.array(value, dtype=np.int64)
    if array.ndim != 1:
        raise ValueError(f"labels must be a vector, got shape {array.shape}")
    array.setflags(write=False)
    return array


class NoiseConfig(BaseModel):
    # Experiments sweep sigma over [0, 0.8]; larger values are allowed for general use.
    sigma: NonNegativeFloat = 0.0
    seed: int = Field(0, ge=0, le=SEED_MAX)


class Dataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray  # [N x D] float64
    labels: np.ndarray  # [N] int64
    noise_sigma: NonNegativeFloat = 0.0
    seed: int = Field(0, ge=0, le=SEED_MAX)
    image_shape: Optional[Tuple[int, int]] = None

    @field_validator("images", mode="before")
    @classmethod
    def _images_array(cls, value):
        return _frozen_images(value)

    @field_validator("labels", mode="before")
    @classmethod
    def _labels_array(cls, value):
        return _frozen_labels(value)

    @model_validator(mode="after")
    def _check_counts(self) -> "Dataset":
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.image_shape is not None and self.image_shape[0] * self.image_shape[1] != self.images.shape[1]:
            raise ValueError(f"image_shape {self.image_shape} does not cover {self.images.shape[1]} features")
        return self

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.images.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return self.model_copy(update={
            "images": _frozen_images(self.images[indices]),
            "labels": _frozen_labels(self.labels[indices]),
        })

    def first_index_of(self, label: int) -> int:
        matches = np.flatnonzero(self.labels == label)
        if matches.size == 0:
            raise RejectedInputError(f"no sample with label {label}")
        return int(matches[0])

    def fingerprint(self) -> bytes:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.images).astype("<f8").tobytes())
        digest.update(np.ascontiguousarray(self.labels).astype("<i8").tobytes())
        return digest.digest()


def derive_seed(master_seed: int, *keys: int) -> int:
    """Deterministic child seed for an experiment arm / split / purpose."""
    state = np.random.SeedSequence([int(master_seed), *[int(k) for k in keys]]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def scale_to_unit(raw: np.ndarray) -> np.ndarray:
    """Maps bytes 0..255 onto [0, 1] as value / 255."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def load_mnist(images_path: str, labels_path: str) -> Dataset:
    raw = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if raw.pixels.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path} holds {raw.pixels.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    return Dataset(images=scale_to_unit(raw.pixels), labels=labels, image_shape=(raw.rows, raw.cols))


def add_gaussian_noise(dataset: Dataset, cfg: NoiseConfig) -> Dataset:
    """Adds i.i.d. N(0, sigma^2) to every pixel. Values are not clipped back into [0, 1]."""
    if dataset.noise_sigma != 0.0:
        raise RejectedInputError(f"dataset already carries noise (sigma={dataset.noise_sigma}); refusing to add more")
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot add noise to an empty dataset")
    if cfg.sigma == 0.0:
        return dataset.model_copy(update={"seed": cfg.seed})

    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.sigma, size=dataset.images.shape)
    logger.debug(f"Adding noise sigma={cfg.sigma} seed={cfg.seed} to {len(dataset)} samples")
    return dataset.model_copy(update={
        "images": _frozen_images(dataset.images + noise),
        "noise_sigma": cfg.sigma,
        "seed": cfg.seed,
    })
