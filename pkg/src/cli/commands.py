import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from src.cli.config import (
    SEED_BATCH_ORDER,
    SEED_INIT,
    SEED_TEST_NOISE,
    SEED_TRAIN_NOISE,
    ExperimentConfig,
)
from src.cli.heatmap import compose_grid, save_heatmaps
from src.cli.selftest import CheckResult, run_selftest, summary
from src.dataio.dataset import Dataset, NoiseConfig, add_gaussian_noise, load_mnist
from src.errors import DataFormatError, RejectedInputError
from src.genmodel.generative import GenerativeSpec, pattern_vs_filter_demo, report_csv, report_table
from src.network.mlp import Mlp, build_mlp, predict
from src.network.persistence import load_mlp, mlp_fingerprint, save_mlp
from src.network.train import accuracy, train
from src.patterns.moments import PatternSet, check_fingerprint, estimate_patterns
from src.patterns.persistence import load_patterns, save_patterns
from src.relevance.explain import RelevanceReport, explain
from src.relevance.rules import Rule

logger = logging.getLogger(__name__)

MNIST_SHAPE = (28, 28)


class ArmMetrics(BaseModel):
    sigma: float
    train_accuracy: float
    test_accuracy: float
    final_loss: Optional[float] = None


class PatternSummary(BaseModel):
    sigma: float
    path: str
    degenerate_neurons: int


class ExplainResult(BaseModel):
    csv_path: str
    image_paths: List[str]
    target: int
    conservation_residual: float


class GridResult(BaseModel):
    path: str
    rows: int
    cols: int


class Experiment:
    """Loads the MNIST splits once and hands out per-arm (noise level) views of them."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._cache: Dict[Tuple[str, float], Dataset] = {}
        self._models: Dict[float, Mlp] = {}
        self._patterns: Dict[float, PatternSet] = {}

    def _clean(self, split: str) -> Dataset:
        key = (split, -1.0)
        if key not in self._cache:
            cfg = self.config
            if split == "test" and cfg.mnist_test_images:
                dataset = load_mnist(cfg.mnist_test_images, cfg.mnist_test_labels)
            else:
                cfg.require_mnist()
                dataset = load_mnist(cfg.mnist_images, cfg.mnist_labels)
                if cfg.train_limit:
                    dataset = dataset.subset(np.arange(min(cfg.train_limit, len(dataset))))
            self._cache[key] = dataset
        return self._cache[key]

    def noisy(self, split: str, sigma: float) -> Dataset:
        key = (split, sigma)
        if key not in self._cache:
            purpose = SEED_TRAIN_NOISE if split == "train" else SEED_TEST_NOISE
            noise = NoiseConfig(sigma=sigma, seed=self.config.arm_seed(sigma, purpose))
            self._cache[key] = add_gaussian_noise(self._clean(split), noise)
        return self._cache[key]

    def training_data(self, sigma: float) -> Dataset:
        return self.noisy("train", sigma if self.config.train_on_noisy else 0.0)

    def model(self, sigma: float) -> Mlp:
        sigma = self.config.noise_level(sigma)
        if sigma not in self._models:
            self._models[sigma] = load_mlp(self.config.model_path(sigma))
        return self._models[sigma]

    def patterns(self, sigma: float, model: Mlp) -> PatternSet:
        sigma = self.config.noise_level(sigma)
        if sigma not in self._patterns:
            self._patterns[sigma] = load_patterns(self.config.patterns_path(sigma))
        check_fingerprint(self._patterns[sigma], mlp_fingerprint(model))
        return self._patterns[sigma]

    def target_for(self, model: Mlp, dataset: Dataset, index: int, target: Optional[int]) -> int:
        if target is not None:
            return target
        if self.config.explain_predicted:
            return int(predict(model, dataset.images[index]))
        return int(dataset.labels[index])


def cmd_train(config: ExperimentConfig) -> List[ArmMetrics]:
    """One 784-hidden-10 model per noise level, saved as DTDN, plus a plain-text metrics report."""
    config.require_mnist(need_test=True)
    experiment = Experiment(config)
    metrics = []
    for sigma in config.noise_levels:
        data = experiment.training_data(sigma)
        model = build_mlp([data.num_features, config.hidden_units, 10], seed=config.model_seed(sigma, SEED_INIT))
        train_cfg = config.train.model_copy(update={"seed": config.model_seed(sigma, SEED_BATCH_ORDER)})
        logger.info(f"Training arm sigma={sigma} on {len(data)} samples ({train_cfg.epochs} epochs)")
        model, history = train(model, data, train_cfg)
        save_mlp(model, config.model_path(sigma))

        arm = ArmMetrics(
            sigma=sigma,
            train_accuracy=accuracy(model, data),
            test_accuracy=accuracy(model, experiment.noisy("test", sigma)),
            final_loss=history[-1].loss if history else None,
        )
        logger.info(f"Arm sigma={sigma}: train accuracy {arm.train_accuracy:.4f}, test accuracy {arm.test_accuracy:.4f}")
        metrics.append(arm)

    os.makedirs(config.out_dir, exist_ok=True)
    with open(config.metrics_path(), "w") as f:
        f.write("sigma train_accuracy test_accuracy final_loss\n")
        for arm in metrics:
            loss = "nan" if arm.final_loss is None else f"{arm.final_loss:.6f}"
            f.write(f"{arm.sigma:.2f} {arm.train_accuracy:.6f} {arm.test_accuracy:.6f} {loss}\n")
    return metrics


def _current_patterns(path: str, model: Mlp, data: Dataset) -> Optional[PatternSet]:
    """The pattern file at ``path`` if it was estimated for exactly this model and training split."""
    if not os.path.exists(path):
        return None
    try:
        patterns = load_patterns(path)
        check_fingerprint(patterns, mlp_fingerprint(model), data.fingerprint())
    except DataFormatError as e:
        logger.warning(f"Re-estimating {path}: {e}")
        return None
    logger.info(f"Pattern file {path} is up to date")
    return patterns


def cmd_patterns(config: ExperimentConfig) -> List[PatternSummary]:
    """Estimates one pattern set per noise level on that arm's noisy training split."""
    experiment = Experiment(config)
    summaries = []
    for sigma in config.noise_levels:
        model = experiment.model(sigma)
        data = experiment.noisy("train", sigma)
        path = config.patterns_path(sigma)
        patterns = _current_patterns(path, model, data)
        if patterns is None:
            patterns = estimate_patterns(model, data)
            save_patterns(patterns, path)
        summaries.append(PatternSummary(sigma=sigma, path=path, degenerate_neurons=patterns.degenerate_count))
        logger.info(f"Arm sigma={sigma}: {patterns.degenerate_count} degenerate neurons")
    return summaries


def explain_test_image(experiment: Experiment, sigma: float, index: int, rule: Rule,
                       target: Optional[int] = None, model_path: Optional[str] = None,
                       patterns_path: Optional[str] = None,
                       stabilizer: Optional[float] = None) -> Tuple[RelevanceReport, Dataset]:
    config = experiment.config
    sigma = config.noise_level(sigma)
    model = load_mlp(model_path) if model_path else experiment.model(sigma)
    dataset = experiment.noisy("test", sigma)
    if not 0 <= index < len(dataset):
        raise RejectedInputError(f"image index {index} out of range for {len(dataset)} test images")
    patterns = None
    if rule.requires_patterns:
        if patterns_path:
            patterns = load_patterns(patterns_path)
            check_fingerprint(patterns, mlp_fingerprint(model))
        else:
            patterns = experiment.patterns(sigma, model)
    target = experiment.target_for(model, dataset, index, target)
    stabilizer = config.stabilizer if stabilizer is None else stabilizer
    report = explain(model, dataset.images[index], target, rule, patterns, stabilizer)
    return report, dataset


def cmd_explain(config: ExperimentConfig, sigma: float, index: int, rule: Rule, target: Optional[int] = None,
                model_path: Optional[str] = None, patterns_path: Optional[str] = None,
                out_path: Optional[str] = None) -> ExplainResult:
    """Writes the raw relevance as CSV and renders it as PNG and PGM."""
    experiment = Experiment(config)
    report, dataset = explain_test_image(experiment, sigma, index, rule, target, model_path, patterns_path)
    shape = dataset.image_shape or MNIST_SHAPE
    prefix = out_path or os.path.join(config.out_dir, "explain", f"{rule.value}_sigma{sigma:.2f}_index{index}")
    prefix = os.path.splitext(prefix)[0]
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)

    csv_path = f"{prefix}.csv"
    header = f"rule={rule.value},sigma={sigma:g},target={report.target},index={index}"
    np.savetxt(csv_path, report.input_relevance.reshape(shape), fmt="%.17g", delimiter=",", header=header)
    image_paths = save_heatmaps(report.input_relevance.reshape(shape), prefix, config.style)

    if rule.is_deep_taylor:
        print(f"conservation residual: {report.conservation_residual:.3e}")
    logger.info(f"Explanation written to {csv_path}")
    return ExplainResult(csv_path=csv_path, image_paths=image_paths, target=report.target,
                         conservation_residual=report.conservation_residual)


def _relevance_map(experiment: Experiment, sigma: float, index: int, rule: Rule) -> np.ndarray:
    report, dataset = explain_test_image(experiment, sigma, index, rule)
    return report.input_relevance.reshape(dataset.image_shape or MNIST_SHAPE)


def cmd_grid(config: ExperimentConfig, mode: str) -> GridResult:
    """fig1: one digit, rules x noise levels. fig2: digits x rules at a single noise level."""
    experiment = Experiment(config)
    test = experiment.noisy("test", 0.0)
    quiet = not sys.stderr.isatty()

    if mode == "fig1":
        index = config.digit_indices[0] if config.digit_indices else test.first_index_of(config.fig1_digit)
        row_labels = [rule.value for rule in config.rules]
        col_labels = [f"sigma {sigma:.1f}" for sigma in config.noise_levels]
        cells = [
            [_relevance_map(experiment, sigma, index, rule) for sigma in config.noise_levels]
            for rule in tqdm(config.rules, desc="Grid rows", disable=quiet)
        ]
    elif mode == "fig2":
        indices = config.digit_indices or [test.first_index_of(digit) for digit in range(10)]
        row_labels = [f"#{index} ({test.labels[index]})" for index in indices]
        col_labels = [rule.value for rule in config.rules]
        cells = [
            [_relevance_map(experiment, config.fig2_sigma, index, rule) for rule in config.rules]
            for index in tqdm(indices, desc="Grid rows", disable=quiet)
        ]
    else:
        raise RejectedInputError(f"unknown grid mode '{mode}' (expected fig1 or fig2)")

    path = os.path.join(config.out_dir, "grids", f"{mode}.png")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    compose_grid(cells, row_labels, col_labels, config.style).save(path, format="PNG")
    logger.info(f"Wrote {len(row_labels)}x{len(col_labels)} grid to {path}")
    return GridResult(path=path, rows=len(row_labels), cols=len(col_labels))


def cmd_synth(out_dir: str, dim: int = 20, distractors: int = 5, sigma_eps: float = 0.1, samples: int = 50000,
              ridge: float = 0.0, seed: int = 0, write_csv: bool = False) -> str:
    """Runs the pattern-vs-filter lab and writes its table (and optionally the vectors as CSV)."""
    try:
        spec = GenerativeSpec.random(dim=dim, distractors=distractors, sigma_eps=sigma_eps, seed=seed)
    except ValueError as e:
        raise RejectedInputError(f"invalid generative model settings: {e}") from e
    report = pattern_vs_filter_demo(spec, samples, ridge=ridge)
    table = report_table(report, spec)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "synth.txt"), "w") as f:
        f.write(table)
    if write_csv:
        with open(os.path.join(out_dir, "synth.csv"), "w") as f:
            f.write(report_csv(report, spec))
    print(table, end="")
    return table


def find_artifacts(config: ExperimentConfig) -> Dict[float, Dict[str, bool]]:
    return {
        sigma: {
            "model": os.path.exists(config.model_path(sigma)),
            "patterns": os.path.exists(config.patterns_path(sigma)),
        }
        for sigma in config.noise_levels
    }


def cmd_selftest(seed: int = 0) -> List[CheckResult]:
    """Runs every invariant check on small built-in fixtures; the caller exits non-zero on any failure."""
    results = run_selftest(seed)
    print(summary(results), end="")
    return results
