import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.errors import DegenerateDenominatorError, RejectedInputError
from src.network.mlp import (
    Activation,
    Mlp,
    augment_bias_as_input,
    augment_input,
    forward_trace,
    input_gradient,
)
from src.patterns.moments import PatternSet
from src.relevance.rules import DEGENERATE_TOLERANCE, Rule, search_direction

logger = logging.getLogger(__name__)


class RelevanceReport(BaseModel):
    """Relevance per layer, index 0 being the input and the last entry the (one-hot) output."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layer_relevances: List[np.ndarray]
    bias_relevances: List[np.ndarray]  # one per propagated layer, over that layer's neurons
    target: int
    rule: Rule
    conservation_residual: float

    @property
    def input_relevance(self) -> np.ndarray:
        return self.layer_relevances[0]

    @property
    def output_relevance(self) -> np.ndarray:
        return self.layer_relevances[-1]

    @property
    def total_bias_relevance(self) -> float:
        return float(sum(b.sum() for b in self.bias_relevances))


def propagate_dense(R_upper: np.ndarray, x_aug: np.ndarray, weights_aug: np.ndarray, z: np.ndarray, rule: Rule,
                    patterns_layer: Optional[np.ndarray] = None, stabilizer: float = 0.0,
                    layer: Optional[int] = None, relu_upper: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Redistributes the relevance of one dense layer onto its inputs.

    Neuron j hands input i the fraction ``w'_ji v_i / (w'_j . v)`` of its
    relevance, ``v`` being the rule's search direction. This is the first
    order Taylor term around the root point ``x' - t v`` and is exact for
    affine pre-activations. The last (constant-1) input collects the bias
    relevance. Returns ``(R_lower, bias_relevance)``.
    """
    fan_out, fan_in_aug = weights_aug.shape
    if R_upper.shape != (fan_out,) or z.shape != (fan_out,) or x_aug.shape != (fan_in_aug,):
        raise RejectedInputError(
            f"inconsistent shapes: R {R_upper.shape}, z {z.shape}, x' {x_aug.shape}, W' {weights_aug.shape}"
        )
    if not np.all(np.isfinite(R_upper)):
        raise RejectedInputError("upper-layer relevance is not finite")
    if stabilizer < 0:
        raise RejectedInputError(f"stabilizer must be >= 0, got {stabilizer}")
    if relu_upper and rule.masks_inactive and np.any((R_upper != 0) & (z <= 0)):
        raise RejectedInputError("inactive ReLU neurons must not carry relevance")

    R_lower = np.zeros(fan_in_aug - 1)
    bias_relevance = np.zeros(fan_out)
    carrying = np.flatnonzero(R_upper != 0)
    if carrying.size == 0:
        return R_lower, bias_relevance

    weights = weights_aug[carrying]
    patterns = None if patterns_layer is None else patterns_layer[:, carrying].T
    products = weights * search_direction(rule, weights, x_aug, patterns)
    denominators = products.sum(axis=1)

    if stabilizer == 0.0:
        degenerate = np.abs(denominators) < DEGENERATE_TOLERANCE
        if degenerate.any():
            k = int(np.argmax(degenerate))
            raise DegenerateDenominatorError(rule.value, layer, int(carrying[k]), float(denominators[k]))
    else:
        denominators = denominators + stabilizer * np.where(denominators >= 0, 1.0, -1.0)

    contributions = R_upper[carrying, None] * products / denominators[:, None]
    R_lower = contributions[:, :-1].sum(axis=0)
    bias_relevance[carrying] = contributions[:, -1]
    return R_lower, bias_relevance


def _residual(input_relevance: np.ndarray, bias_relevances: List[np.ndarray], r_target: float) -> float:
    total = float(input_relevance.sum()) + float(sum(b.sum() for b in bias_relevances))
    return abs(total - r_target) / max(abs(r_target), 1e-12)


def check_conservation(report: RelevanceReport) -> float:
    """Relative gap between output relevance and everything that reached the input or a bias neuron."""
    r_target = float(report.output_relevance[report.target])
    return _residual(report.input_relevance, report.bias_relevances, r_target)


def _check_patterns(mlp: Mlp, patterns: PatternSet) -> None:
    if len(patterns.layers) != len(mlp.layers):
        raise RejectedInputError(f"pattern set has {len(patterns.layers)} layers, network has {len(mlp.layers)}")
    for k, (layer, pattern) in enumerate(zip(mlp.layers, patterns.layers)):
        if pattern.shape != (layer.fan_in + 1, layer.fan_out):
            raise RejectedInputError(
                f"layer {k}: pattern shape {pattern.shape} != ({layer.fan_in + 1}, {layer.fan_out})"
            )


def explain(mlp: Mlp, x, target: int, rule: Rule, patterns: Optional[PatternSet] = None,
            stabilizer: float = 0.0) -> RelevanceReport:
    """Explains logit ``target`` (before the softmax) for a single input."""
    trace = forward_trace(mlp, x)
    if trace.is_batch:
        raise RejectedInputError("explain takes a single sample")
    if not 0 <= target < mlp.output_dim:
        raise RejectedInputError(f"target {target} out of range for {mlp.output_dim} outputs")
    if rule.requires_patterns:
        if patterns is None:
            raise RejectedInputError(f"rule {rule.value} needs a pattern set")
        _check_patterns(mlp, patterns)

    output = np.zeros(mlp.output_dim)
    output[target] = trace.logits[target]

    if not rule.is_deep_taylor:
        gradient = input_gradient(mlp, trace, target)
        relevance = gradient if rule is Rule.SALIENCY else gradient * trace.inputs
        return RelevanceReport(
            layer_relevances=[relevance, output], bias_relevances=[], target=target, rule=rule,
            conservation_residual=_residual(relevance, [], float(output[target])),
        )

    layer_relevances: List[np.ndarray] = [output]
    bias_relevances: List[np.ndarray] = []
    R = output
    for k in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[k]
        R, bias_rel = propagate_dense(
            R,
            augment_input(trace.layer_input(k)),
            augment_bias_as_input(layer),
            trace.pre_activations[k],
            rule,
            patterns_layer=patterns.layers[k] if rule.requires_patterns else None,
            stabilizer=stabilizer,
            layer=k,
            relu_upper=layer.activation is Activation.RELU,
        )
        layer_relevances.insert(0, R)
        bias_relevances.insert(0, bias_rel)

    residual = _residual(layer_relevances[0], bias_relevances, float(output[target]))
    logger.debug(f"Explained target {target} with rule {rule.value}: residual={residual:.3e}")
    return RelevanceReport(
        layer_relevances=layer_relevances, bias_relevances=bias_relevances, target=target, rule=rule,
        conservation_residual=residual,
    )


def normalized_relevance(report: RelevanceReport) -> np.ndarray:
    """Input relevance divided by its signed total (zeros when the total vanishes)."""
    total = report.input_relevance.sum()
    if total == 0:
        return np.zeros_like(report.input_relevance)
    return report.input_relevance / total
