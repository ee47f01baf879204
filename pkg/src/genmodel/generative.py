import logging
import warnings
from enum import Enum
from typing import List, Optional

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, field_validator, model_validator

from src.dataio.dataset import SEED_MAX, derive_seed
from src.errors import RejectedInputError, SingularityError
from src.network.mlp import Activation, DenseLayer, Mlp, augment_input, forward_trace
from src.patterns.moments import MomentAccumulator, accumulate, finalize
from src.relevance.rules import Rule, implied_generative_pattern

logger = logging.getLogger(__name__)


class SignalDistribution(str, Enum):
    STANDARD_NORMAL = "StandardNormal"
    PLUS_MINUS_ONE = "PlusMinusOne"


class GenerativeSpec(BaseModel):
    """x = a_t s_t + A_n s_n + eps, with s_n ~ N(0, I) independent of s_t and eps ~ N(0, sigma^2 I)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    a_t: np.ndarray  # [D]
    A_n: Optional[np.ndarray] = None  # [D x K], K may be 0
    sigma_eps: NonNegativeFloat = 0.0
    s_t_dist: SignalDistribution = SignalDistribution.STANDARD_NORMAL
    seed: int = Field(0, ge=0, le=SEED_MAX)

    @field_validator("a_t", "A_n", mode="before")
    @classmethod
    def _as_array(cls, value):
        array = np.array(value, dtype=np.float64)
        array.setflags(write=False)
        return array

    @model_validator(mode="before")
    @classmethod
    def _no_distractors(cls, data):
        # "No distractors" becomes a D x 0 matrix.
        if isinstance(data, dict) and (data.get("A_n") is None or np.size(data["A_n"]) == 0):
            data = {**data, "A_n": np.zeros((np.size(data.get("a_t", [])), 0))}
        return data

    @model_validator(mode="after")
    def _check_shapes(self) -> "GenerativeSpec":
        if self.a_t.ndim != 1 or not np.any(self.a_t != 0):
            raise ValueError("a_t must be a non-zero vector")
        A_n = self.A_n
        if A_n.ndim != 2 or A_n.shape[0] != self.dim:
            raise ValueError(f"A_n must be [{self.dim} x K], got shape {A_n.shape}")
        if not (np.all(np.isfinite(self.a_t)) and np.all(np.isfinite(A_n))):
            raise ValueError("patterns must be finite")
        return self

    @property
    def dim(self) -> int:
        return self.a_t.shape[0]

    @property
    def distractors(self) -> int:
        return self.A_n.shape[1]

    @classmethod
    def random(cls, dim: int = 20, distractors: int = 5, sigma_eps: float = 0.1, seed: int = 0,
               s_t_dist: SignalDistribution = SignalDistribution.STANDARD_NORMAL) -> "GenerativeSpec":
        """Standard-normal task and distractor patterns; they overlap (are not orthogonal) in general."""
        rng = np.random.default_rng(derive_seed(seed, 0))
        return cls(
            a_t=rng.standard_normal(dim),
            A_n=rng.standard_normal((dim, distractors)),
            sigma_eps=sigma_eps,
            s_t_dist=s_t_dist,
            seed=derive_seed(seed, 1),
        )


class SyntheticBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    X: np.ndarray  # [D x N], one sample per column
    s_t: np.ndarray  # [N]
    s_n: np.ndarray  # [K x N]
    noise: np.ndarray  # [D x N]

    @property
    def size(self) -> int:
        return self.s_t.shape[0]


class FilterDiagnostics(BaseModel):
    task_gain: float
    max_leak: float


class PatternFilterReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    w: np.ndarray
    a_hat: np.ndarray
    cosine_w: float
    cosine_a_hat: float
    cosine_z_rule: float  # mean over samples of the z-rule's implied pattern
    diagnostics: FilterDiagnostics
    samples: int


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    norm = np.linalg.norm(u) * np.linalg.norm(v)
    return float(u @ v / norm) if norm > 0 else 0.0


def sample(spec: GenerativeSpec, n: int) -> SyntheticBatch:
    if n < 1:
        raise RejectedInputError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(spec.seed)
    if spec.s_t_dist is SignalDistribution.STANDARD_NORMAL:
        s_t = rng.standard_normal(n)
    else:
        s_t = rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
    s_n = rng.standard_normal((spec.distractors, n))
    noise = rng.normal(0.0, spec.sigma_eps, size=(spec.dim, n)) if spec.sigma_eps > 0 else np.zeros((spec.dim, n))
    X = np.outer(spec.a_t, s_t) + spec.A_n @ s_n + noise
    return SyntheticBatch(X=X, s_t=s_t, s_n=s_n, noise=noise)


def fit_projection(batch: SyntheticBatch, ridge: float = 0.0) -> np.ndarray:
    """Least-squares filter w minimising sum_n (w.x_n - s_t[n])^2 (+ ridge |w|^2), via the normal equations."""
    D, N = batch.X.shape
    if N <= D:
        raise RejectedInputError(f"need more samples than dimensions (N={N}, D={D})")
    if ridge < 0:
        raise RejectedInputError(f"ridge must be >= 0, got {ridge}")
    gram = batch.X @ batch.X.T + ridge * np.eye(D)
    rhs = batch.X @ batch.s_t
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            return scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as e:
        raise SingularityError(f"normal equations are singular ({e}); retry with a positive ridge") from e


def verify_filter_conditions(w: np.ndarray, spec: GenerativeSpec) -> FilterDiagnostics:
    """w.a_t (should be 1) and the largest |w.A_n[:, k]| (should be 0). No thresholds applied."""
    if w.shape != (spec.dim,):
        raise RejectedInputError(f"filter of shape {w.shape} does not match dimension {spec.dim}")
    leaks = np.abs(w @ spec.A_n)
    return FilterDiagnostics(task_gain=float(w @ spec.a_t), max_leak=float(leaks.max()) if leaks.size else 0.0)


def _linear_readout(w: np.ndarray) -> Mlp:
    return Mlp.from_layers([DenseLayer(weights=w[None, :], bias=np.zeros(1), activation=Activation.IDENTITY)])


def pattern_vs_filter_demo(spec: GenerativeSpec, n: int, ridge: float = 0.0,
                           z_rule_samples: int = 1000) -> PatternFilterReport:
    """Fits the filter w, estimates the pattern of the linear neuron it defines, and compares both with a_t."""
    batch = sample(spec, n)
    w = fit_projection(batch, ridge)

    readout = _linear_readout(w)
    trace = forward_trace(readout, batch.X.T)
    patterns = finalize(accumulate(MomentAccumulator.empty(readout), trace))
    a_hat = patterns.layers[0][:spec.dim, 0]

    w_aug = np.append(w, 0.0)
    implied: List[float] = []
    for x in batch.X.T[:z_rule_samples]:
        if abs(w @ x) > 1e-12:
            implied.append(cosine(implied_generative_pattern(Rule.Z, w_aug, augment_input(x))[:spec.dim], spec.a_t))

    report = PatternFilterReport(
        w=w,
        a_hat=a_hat,
        cosine_w=cosine(w, spec.a_t),
        cosine_a_hat=cosine(a_hat, spec.a_t),
        cosine_z_rule=float(np.mean(implied)) if implied else 0.0,
        diagnostics=verify_filter_conditions(w, spec),
        samples=n,
    )
    logger.info(
        f"Pattern vs filter (D={spec.dim}, K={spec.distractors}, sigma={spec.sigma_eps}, N={n}): "
        f"cos(w, a_t)={report.cosine_w:.4f} cos(a_hat, a_t)={report.cosine_a_hat:.4f}"
    )
    return report


def report_table(report: PatternFilterReport, spec: GenerativeSpec) -> str:
    rows = [
        ("dimension", f"{spec.dim}"),
        ("distractors", f"{spec.distractors}"),
        ("sigma_eps", f"{spec.sigma_eps:g}"),
        ("samples", f"{report.samples}"),
        ("task_gain w.a_t", f"{report.diagnostics.task_gain:.6f}"),
        ("max_leak |w.A_n|", f"{report.diagnostics.max_leak:.6f}"),
        ("cos(w, a_t)", f"{report.cosine_w:.6f}"),
        ("cos(a_hat, a_t)", f"{report.cosine_a_hat:.6f}"),
        ("mean cos(z-rule pattern, a_t)", f"{report.cosine_z_rule:.6f}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows) + "\n"


def report_csv(report: PatternFilterReport, spec: GenerativeSpec) -> str:
    lines = ["index,a_t,w,a_hat"]
    for i in range(spec.dim):
        lines.append(f"{i},{float(spec.a_t[i])!r},{float(report.w[i])!r},{float(report.a_hat[i])!r}")
    return "\n".join(lines) + "\n"
