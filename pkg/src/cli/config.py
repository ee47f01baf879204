import logging
import os
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, NonNegativeFloat, NonNegativeInt, PositiveInt, ValidationError, field_validator

from src.cli.heatmap import HeatmapStyle
from src.dataio.dataset import SEED_MAX, derive_seed
from src.errors import ArtifactMissingError, RejectedInputError
from src.network.train import TrainConfig
from src.relevance.rules import Rule

logger = logging.getLogger(__name__)

# Purpose keys for derived seeds.
SEED_TRAIN_NOISE = 1
SEED_TEST_NOISE = 2
SEED_INIT = 3
SEED_BATCH_ORDER = 4

ENV_DEFAULTS = {
    "mnist_images": "DTD_MNIST_IMAGES",
    "mnist_labels": "DTD_MNIST_LABELS",
    "mnist_test_images": "DTD_MNIST_TEST_IMAGES",
    "mnist_test_labels": "DTD_MNIST_TEST_LABELS",
    "out_dir": "DTD_OUT_DIR",
}


class ExperimentConfig(BaseModel):
    noise_levels: List[NonNegativeFloat] = [0.0, 0.2, 0.4, 0.6, 0.8]
    rules: List[Rule] = [Rule.SALIENCY, Rule.Z, Rule.WPLUS, Rule.APLUS]
    digit_indices: List[NonNegativeInt] = []
    master_seed: int = Field(0, ge=0, le=SEED_MAX)
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None
    mnist_test_images: Optional[str] = None
    mnist_test_labels: Optional[str] = None
    out_dir: str = "out"
    train_on_noisy: bool = True
    stabilizer: NonNegativeFloat = 0.0
    hidden_units: PositiveInt = 200
    train_limit: Optional[PositiveInt] = None
    explain_predicted: bool = False
    fig1_digit: NonNegativeInt = 4
    fig2_sigma: NonNegativeFloat = 0.2
    train: TrainConfig = TrainConfig()
    style: HeatmapStyle = HeatmapStyle()

    @field_validator("rules", mode="before")
    @classmethod
    def _parse_rules(cls, value):
        return [Rule.parse(v) if isinstance(v, str) else v for v in value]

    @field_validator("noise_levels")
    @classmethod
    def _two_decimals(cls, value):
        # Artifact names keep two decimals; seeds are keyed on the same rounding.
        for sigma in value:
            if abs(sigma * 100 - round(sigma * 100)) > 1e-6:
                raise ValueError(f"noise level {sigma} has more than two decimals")
        if len({arm_key(sigma) for sigma in value}) != len(value):
            raise ValueError(f"noise levels must be distinct, got {value}")
        return value

    def noise_level(self, sigma: float) -> float:
        """The configured noise level ``sigma`` stands for."""
        for level in self.noise_levels:
            if arm_key(level) == arm_key(sigma):
                return level
        configured = ", ".join(f"{level:g}" for level in self.noise_levels)
        raise RejectedInputError(f"noise level {sigma:g} is not configured (configured: {configured})")

    def require_mnist(self, need_test: bool = False) -> None:
        """Fails fast when the training (and optionally test) files are not on disk."""
        required = [("mnist_images", self.mnist_images), ("mnist_labels", self.mnist_labels)]
        if need_test and self.mnist_test_images:
            required += [("mnist_test_images", self.mnist_test_images), ("mnist_test_labels", self.mnist_test_labels)]
        for name, path in required:
            if not path:
                raise ArtifactMissingError(f"{name} is not configured (flag, config file or {ENV_DEFAULTS[name]})")
            if not os.path.exists(path):
                raise ArtifactMissingError(f"{name} points to a missing file: {path}")

    # --- artifact layout ---

    def model_path(self, sigma: float) -> str:
        return os.path.join(self.out_dir, "models", f"model_sigma{sigma:.2f}.dtdn")

    def patterns_path(self, sigma: float) -> str:
        return os.path.join(self.out_dir, "patterns", f"patterns_sigma{sigma:.2f}.dtdp")

    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, "metrics.txt")

    # --- seeds ---

    def arm_seed(self, sigma: float, purpose: int) -> int:
        return derive_seed(self.master_seed, arm_key(sigma), purpose)

    def model_seed(self, sigma: float, purpose: int) -> int:
        # Training on clean data shares a single model across arms.
        return self.arm_seed(sigma if self.train_on_noisy else 0.0, purpose)


def arm_key(sigma: float) -> int:
    return int(round(sigma * 100))


def _read_toml(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ArtifactMissingError(f"Config file not found: {path}")
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise RejectedInputError(f"{path}: invalid TOML ({e})") from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Environment < TOML file < explicit overrides (CLI flags). ``None`` overrides are ignored."""
    values: Dict[str, Any] = {}
    for field, env_var in ENV_DEFAULTS.items():
        if os.getenv(env_var):
            values[field] = os.getenv(env_var)
    if path:
        values.update(_read_toml(path))
        logger.info(f"Loaded experiment config from {path}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "train":
            values["train"] = {**values.get("train", {}), **value}
        else:
            values[key] = value

    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise RejectedInputError(f"invalid experiment configuration: {e}") from e
