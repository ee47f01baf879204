import logging
from enum import Enum
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator, model_validator

from src.errors import RejectedInputError

logger = logging.getLogger(__name__)


def frozen_array(value, dtype=np.float64) -> np.ndarray:
    """Copies ``value`` into a read-only array of ``dtype``."""
    array = np.array(value, dtype=dtype)
    array.setflags(write=False)
    return array


class Activation(str, Enum):
    IDENTITY = "Identity"
    RELU = "ReLU"

    @property
    def code(self) -> int:
        return 1 if self is Activation.RELU else 0

    @classmethod
    def from_code(cls, code: int) -> "Activation":
        if code == 0:
            return cls.IDENTITY
        if code == 1:
            return cls.RELU
        raise ValueError(f"Unknown activation code {code}")


class DenseLayer(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray  # [fan_out x fan_in]
    bias: np.ndarray  # [fan_out]
    activation: Activation = Activation.IDENTITY

    @field_validator("weights", "bias", mode="before")
    @classmethod
    def _as_float_array(cls, value):
        return frozen_array(value)

    @model_validator(mode="after")
    def _check_shapes(self) -> "DenseLayer":
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be a matrix, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match fan_out {self.weights.shape[0]}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")
        return self

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def pre_activation(self, x: np.ndarray) -> np.ndarray:
        # Works for a single vector or a batch with samples as rows.
        if x.ndim == 1:
            return self.weights @ x + self.bias
        return x @ self.weights.T + self.bias

    def activate(self, z: np.ndarray) -> np.ndarray:
        if self.activation is Activation.RELU:
            return np.maximum(z, 0.0)
        return z.copy()


class Mlp(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layers: List[DenseLayer]
    input_dim: PositiveInt

    @model_validator(mode="after")
    def _check_chain(self) -> "Mlp":
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        if self.layers[0].fan_in != self.input_dim:
            raise ValueError(f"first layer fan_in {self.layers[0].fan_in} != input_dim {self.input_dim}")
        for k in range(1, len(self.layers)):
            if self.layers[k].fan_in != self.layers[k - 1].fan_out:
                raise ValueError(
                    f"layer {k} fan_in {self.layers[k].fan_in} != layer {k - 1} fan_out {self.layers[k - 1].fan_out}"
                )
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise ValueError("the output layer must use the Identity activation (logits, softmax lives in the loss)")
        return self

    @classmethod
    def from_layers(cls, layers: Sequence[DenseLayer]) -> "Mlp":
        return cls(layers=list(layers), input_dim=layers[0].fan_in)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]


class ForwardTrace(BaseModel):
    """Per-layer pre-activations ``z^l`` and activations ``x^l`` of one input (or a batch of inputs)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]

    @property
    def is_batch(self) -> bool:
        return self.inputs.ndim == 2

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]

    def layer_input(self, layer_index: int) -> np.ndarray:
        """Activation feeding layer ``layer_index`` (``x^{l-1}``)."""
        return self.inputs if layer_index == 0 else self.activations[layer_index - 1]


def build_mlp(layer_sizes: Sequence[int], seed: int) -> Mlp:
    """Glorot-uniform initialized network: ReLU on every hidden layer, Identity output, zero biases."""
    if len(layer_sizes) < 2:
        raise RejectedInputError(f"need at least input and output sizes, got {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(layer_sizes) - 1):
        fan_in, fan_out = int(layer_sizes[k]), int(layer_sizes[k + 1])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        is_last = k == len(layer_sizes) - 2
        layers.append(DenseLayer(
            weights=weights,
            bias=np.zeros(fan_out),
            activation=Activation.IDENTITY if is_last else Activation.RELU,
        ))
    return Mlp.from_layers(layers)


def _validated_input(mlp: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != mlp.input_dim:
        raise RejectedInputError(f"input of shape {x.shape} does not match input_dim {mlp.input_dim}")
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("input contains non-finite entries")
    return x


def forward_trace(mlp: Mlp, x) -> ForwardTrace:
    x = _validated_input(mlp, x)
    pre_activations, activations = [], []
    current = x
    for layer in mlp.layers:
        z = layer.pre_activation(current)
        current = layer.activate(z)
        pre_activations.append(frozen_array(z))
        activations.append(frozen_array(current))
    return ForwardTrace(inputs=frozen_array(x), pre_activations=pre_activations, activations=activations)


def forward(mlp: Mlp, x) -> np.ndarray:
    """Logits ``z^L``; the softmax is never applied here."""
    return forward_trace(mlp, x).logits


def input_gradient(mlp: Mlp, trace: ForwardTrace, target: int) -> np.ndarray:
    """Gradient of logit ``target`` w.r.t. the input, by reverse accumulation through the recorded ReLU mask."""
    if trace.is_batch:
        raise RejectedInputError("input_gradient needs a single-sample trace")
    if not 0 <= target < mlp.output_dim:
        raise RejectedInputError(f"target {target} out of range for {mlp.output_dim} outputs")

    grad = mlp.layers[-1].weights[target].copy()
    for k in range(len(mlp.layers) - 2, -1, -1):
        layer = mlp.layers[k]
        if layer.activation is Activation.RELU:
            grad = grad * (trace.pre_activations[k] > 0)
        grad = grad @ layer.weights
    return grad


def augment_bias_as_input(layer: DenseLayer) -> np.ndarray:
    """Weights with the bias appended as the weight of a constant-1 input neuron."""
    return np.hstack([layer.weights, layer.bias[:, None]])


def augment_input(x: np.ndarray) -> np.ndarray:
    """Appends the constant-1 neuron to a vector, or a column of ones to a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.append(x, 1.0)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def augmented_pre_activation(weights_aug: np.ndarray, x_aug: np.ndarray) -> np.ndarray:
    # Splits off the constant column so the result is bitwise equal to ``W x + b``.
    return np.ascontiguousarray(weights_aug[:, :-1]) @ x_aug[:-1] + weights_aug[:, -1] * x_aug[-1]


def predict(mlp: Mlp, x) -> np.ndarray:
    """Argmax class per sample; ``np.argmax`` breaks ties toward the lowest index."""
    logits = forward(mlp, x)
    return np.argmax(logits, axis=-1)
