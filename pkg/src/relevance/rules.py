import logging
from enum import Enum
from typing import Iterator, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.errors import DegenerateDirectionError, RejectedInputError

logger = logging.getLogger(__name__)

# |w'.v| below this is treated as a direction parallel to the neuron's null space.
DEGENERATE_TOLERANCE = 1e-12


class Rule(str, Enum):
    SALIENCY = "Saliency"
    GRAD_TIMES_INPUT = "GradTimesInput"
    Z = "Z"
    W2 = "W2"
    WPLUS = "WPlus"
    A = "A"
    APLUS = "APlus"

    @classmethod
    def parse(cls, name: str) -> "Rule":
        lookup = {rule.value.lower(): rule for rule in cls}
        lookup.update({"w+": cls.WPLUS, "a+": cls.APLUS, "w^2": cls.W2, "gradxinput": cls.GRAD_TIMES_INPUT})
        try:
            return lookup[name.strip().lower()]
        except KeyError:
            valid = ", ".join(rule.value for rule in cls)
            raise RejectedInputError(f"unknown rule '{name}' (valid: {valid})") from None

    @property
    def requires_patterns(self) -> bool:
        return self in (Rule.A, Rule.APLUS)

    @property
    def is_deep_taylor(self) -> bool:
        return self not in (Rule.SALIENCY, Rule.GRAD_TIMES_INPUT)

    @property
    def masks_inactive(self) -> bool:
        """Rules whose direction is zero on inputs with zero activation."""
        return self in (Rule.Z, Rule.WPLUS, Rule.APLUS)


class RootPoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x_tilde: np.ndarray
    direction: np.ndarray
    scale: float


def search_direction(rule: Rule, w_row: np.ndarray, x_aug: np.ndarray,
                     a_row: Optional[np.ndarray] = None) -> np.ndarray:
    """Direction ``v`` along which the root point is sought.

    ``w_row`` (and ``a_row``) may be matrices with one neuron per row; the
    direction is then computed row-wise. The augmented bias coordinate has
    x = 1, so the activation masks always keep it.
    """
    if not rule.is_deep_taylor:
        raise RejectedInputError(f"rule {rule.value} has no root-point search direction")
    if rule.requires_patterns and a_row is None:
        raise RejectedInputError(f"rule {rule.value} needs a pattern row")
    if not rule.requires_patterns and a_row is not None:
        raise RejectedInputError(f"rule {rule.value} does not take a pattern row")
    if np.shape(w_row)[-1] != np.shape(x_aug)[-1] or (a_row is not None and np.shape(a_row) != np.shape(w_row)):
        raise RejectedInputError("weight, input and pattern lengths differ")

    active = x_aug != 0
    if rule is Rule.Z:
        return np.broadcast_to(x_aug, np.shape(w_row)).astype(np.float64)
    if rule is Rule.W2:
        return np.array(w_row, dtype=np.float64)
    if rule is Rule.WPLUS:
        return w_row * active
    if rule is Rule.A:
        return np.array(a_row, dtype=np.float64)
    return a_row * active


def root_point(x_aug: np.ndarray, w_row: np.ndarray, v: np.ndarray) -> RootPoint:
    """Point ``x - t v`` on the line through ``x`` along ``v`` where ``w . x_tilde = 0``."""
    denominator = float(w_row @ v)
    if abs(denominator) < DEGENERATE_TOLERANCE:
        raise DegenerateDirectionError(f"search direction is orthogonal to the weights (w.v = {denominator:.3e})")
    scale = float(w_row @ x_aug) / denominator
    return RootPoint(x_tilde=x_aug - scale * v, direction=np.asarray(v, dtype=np.float64), scale=scale)


def layer_root_points(rule: Rule, weights_aug: np.ndarray, x_aug: np.ndarray, relevance: np.ndarray,
                      patterns_layer: Optional[np.ndarray] = None) -> Iterator[Tuple[int, RootPoint]]:
    """Root point of every neuron of a layer that carries relevance."""
    for j in np.flatnonzero(relevance != 0):
        a_row = None if patterns_layer is None else patterns_layer[:, j]
        v = search_direction(rule, weights_aug[j], x_aug, a_row)
        yield int(j), root_point(x_aug, weights_aug[j], v)


def implied_generative_pattern(rule: Rule, w_row: np.ndarray, x_aug: np.ndarray,
                               a_row: Optional[np.ndarray] = None) -> np.ndarray:
    """Task pattern a rule implicitly assumes for a neuron: its direction scaled so that ``w . a = 1``.

    z gives x / (w.x), w^2 gives w / (w.w), w+ gives w+ / (w+.w+); the pattern
    rules return the learned pattern (already ``w . a = 1`` for an exact
    regression fit).
    """
    v = search_direction(rule, w_row, x_aug, a_row)
    denominator = float(w_row @ v)
    if abs(denominator) < DEGENERATE_TOLERANCE:
        raise DegenerateDirectionError(f"rule {rule.value} implies no pattern here (w.v = {denominator:.3e})")
    return v / denominator
