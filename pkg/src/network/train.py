import logging
import sys
from typing import List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, Field, NonNegativeInt, PositiveFloat, PositiveInt
from tqdm import tqdm

from src.dataio.dataset import SEED_MAX, Dataset
from src.errors import EmptyDatasetError, RejectedInputError, TrainingDivergedError
from src.network.mlp import Activation, DenseLayer, Mlp, predict

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    # The architecture is all the experiment fixes; these defaults are desk-scale choices.
    learning_rate: PositiveFloat = 0.01
    epochs: NonNegativeInt = 10
    batch_size: PositiveInt = 64
    seed: int = Field(0, ge=0, le=SEED_MAX)
    init: Literal["Glorot"] = "Glorot"


class EpochStats(BaseModel):
    epoch: int
    loss: float
    accuracy: float


def _check_labels(mlp: Mlp, dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if dataset.num_features != mlp.input_dim:
        raise RejectedInputError(f"dataset has {dataset.num_features} features, network expects {mlp.input_dim}")
    if dataset.labels.min() < 0 or dataset.labels.max() >= mlp.output_dim:
        raise RejectedInputError(
            f"labels span {dataset.labels.min()}..{dataset.labels.max()}, network has {mlp.output_dim} outputs"
        )


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -float(log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / labels.shape[0]


def _sgd_step(weights: List[np.ndarray], biases: List[np.ndarray], activations: List[Activation],
              x: np.ndarray, y: np.ndarray, learning_rate: float) -> float:
    inputs, pre = [x], []
    current = x
    for w, b, act in zip(weights, biases, activations):
        z = current @ w.T + b
        pre.append(z)
        current = np.maximum(z, 0.0) if act is Activation.RELU else z
        inputs.append(current)

    loss, delta = softmax_cross_entropy(current, y)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss}; lower the learning rate")

    grads = []
    for k in range(len(weights) - 1, -1, -1):
        grads.append((k, delta.T @ inputs[k], delta.sum(axis=0)))
        if k > 0:
            delta = delta @ weights[k]
            if activations[k - 1] is Activation.RELU:
                delta = delta * (pre[k - 1] > 0)

    for k, grad_w, grad_b in grads:
        weights[k] -= learning_rate * grad_w
        biases[k] -= learning_rate * grad_b
    return loss


def train(mlp: Mlp, dataset: Dataset, cfg: TrainConfig) -> Tuple[Mlp, List[EpochStats]]:
    """Mini-batch SGD on softmax cross-entropy. The seed fixes the batch order; the input ``mlp`` is untouched."""
    _check_labels(mlp, dataset)
    rng = np.random.default_rng(cfg.seed)
    weights = [layer.weights.copy() for layer in mlp.layers]
    biases = [layer.bias.copy() for layer in mlp.layers]
    activations = [layer.activation for layer in mlp.layers]
    n = len(dataset)

    def snapshot() -> Mlp:
        return Mlp.from_layers([
            DenseLayer(weights=w, bias=b, activation=act) for w, b, act in zip(weights, biases, activations)
        ])

    history: List[EpochStats] = []
    epochs = tqdm(range(cfg.epochs), desc="Training", unit="epoch", disable=not sys.stderr.isatty())
    for epoch in epochs:
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss = _sgd_step(weights, biases, activations, dataset.images[batch], dataset.labels[batch],
                             cfg.learning_rate)
            total_loss += loss * batch.shape[0]

        epoch_acc = accuracy(snapshot(), dataset)
        stats = EpochStats(epoch=epoch + 1, loss=total_loss / n, accuracy=epoch_acc)
        history.append(stats)
        logger.info(f"Epoch {stats.epoch}/{cfg.epochs}: loss={stats.loss:.4f} accuracy={stats.accuracy:.4f}")

    if cfg.epochs == 0:
        return mlp, history
    return snapshot(), history


def accuracy(mlp: Mlp, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(mlp, dataset.images) == dataset.labels))
