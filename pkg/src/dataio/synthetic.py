import numpy as np

from src.dataio.dataset import Dataset


def gaussian_blobs(n: int, centers, std: float = 0.5, seed: int = 0) -> Dataset:
    """``n`` samples split evenly over isotropic Gaussian blobs; label k belongs to ``centers[k]``."""
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % centers.shape[0]
    images = centers[labels] + rng.normal(0.0, std, size=(n, centers.shape[1]))
    return Dataset(images=images, labels=labels, seed=seed)


def unit_box_images(n: int, dim: int, classes: int = 10, sparsity: float = 0.5, seed: int = 0) -> Dataset:
    """Random images in [0, 1] where about ``sparsity`` of the pixels are exactly zero, like MNIST backgrounds."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(n, dim))
    images[rng.uniform(size=(n, dim)) < sparsity] = 0.0
    return Dataset(images=images, labels=rng.integers(0, classes, size=n), seed=seed)
