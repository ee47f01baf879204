import logging
import os
import tempfile
from typing import Callable, List, Tuple

import numpy as np
from pydantic import BaseModel

from src.cli.heatmap import diverging_colors
from src.dataio.synthetic import unit_box_images
from src.errors import DtdError, ModelFormatError
from src.genmodel.generative import GenerativeSpec, pattern_vs_filter_demo
from src.network.mlp import (
    DenseLayer,
    Mlp,
    augment_bias_as_input,
    augment_input,
    build_mlp,
    forward,
    forward_trace,
    input_gradient,
)
from src.network.persistence import load_mlp, mlp_from_bytes, mlp_to_bytes, save_mlp
from src.patterns.moments import MomentAccumulator, PatternSet, accumulate, estimate_patterns, finalize
from src.patterns.persistence import patterns_from_bytes, patterns_to_bytes
from src.relevance.explain import check_conservation, explain, normalized_relevance
from src.relevance.rules import Rule, layer_root_points

logger = logging.getLogger(__name__)

DEEP_TAYLOR_RULES = [Rule.Z, Rule.W2, Rule.WPLUS, Rule.A, Rule.APLUS]


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str


def central_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of a scalar function by central differences along each coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    step = np.zeros_like(x)
    for i in range(x.size):
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
        step[i] = 0.0
    return grad


def fixture_network(seed: int = 0, sizes: Tuple[int, ...] = (16, 12, 8, 4)) -> Mlp:
    """Small ReLU network with non-zero biases."""
    base = build_mlp(list(sizes), seed=seed)
    rng = np.random.default_rng(seed + 1)
    return Mlp.from_layers([
        DenseLayer(weights=layer.weights, bias=rng.normal(0.0, 0.1, layer.fan_out), activation=layer.activation)
        for layer in base.layers
    ])


def _fixture(seed: int = 0) -> Tuple[Mlp, np.ndarray, PatternSet]:
    mlp = fixture_network(seed)
    data = unit_box_images(200, mlp.input_dim, classes=mlp.output_dim, seed=seed)
    return mlp, data.images, estimate_patterns(mlp, data)


def _non_switching(mlp: Mlp, x: np.ndarray, margin: float) -> bool:
    trace = forward_trace(mlp, x)
    hidden = trace.pre_activations[:-1]
    return all(np.min(np.abs(z)) > margin for z in hidden)


def check_gradient(mlp: Mlp, inputs: np.ndarray) -> CheckResult:
    h = 1e-5
    worst, checked = 0.0, 0
    for x in inputs:
        if checked == 10:
            break
        if not _non_switching(mlp, x, margin=1e-3):
            continue
        trace = forward_trace(mlp, x)
        for target in range(mlp.output_dim):
            numeric = central_difference_gradient(lambda v: float(forward(mlp, v)[target]), x, h)
            worst = max(worst, float(np.max(np.abs(input_gradient(mlp, trace, target) - numeric))))
        checked += 1
    return CheckResult(name="finite-difference gradient", passed=checked > 0 and worst <= 1e-6,
                       detail=f"{checked} points, max abs error {worst:.2e}")


def check_z_equals_grad_times_input(mlp: Mlp, inputs: np.ndarray) -> CheckResult:
    worst = 0.0
    for n, x in enumerate(inputs):
        target = n % mlp.output_dim
        z_rule = explain(mlp, x, target, Rule.Z).input_relevance
        baseline = explain(mlp, x, target, Rule.GRAD_TIMES_INPUT).input_relevance
        scale = max(float(np.max(np.abs(baseline))), 1e-300)
        worst = max(worst, float(np.max(np.abs(z_rule - baseline))) / scale)
    return CheckResult(name="z-rule equals gradient x input", passed=worst <= 1e-8,
                       detail=f"{len(inputs)} samples, max relative gap {worst:.2e}")


def check_conservation_all(mlp: Mlp, inputs: np.ndarray, patterns: PatternSet) -> CheckResult:
    worst = 0.0
    for rule in DEEP_TAYLOR_RULES:
        for n, x in enumerate(inputs):
            report = explain(mlp, x, n % mlp.output_dim, rule, patterns)
            worst = max(worst, check_conservation(report))
    return CheckResult(name="relevance conservation", passed=worst <= 1e-9,
                       detail=f"{len(DEEP_TAYLOR_RULES)} rules x {len(inputs)} samples, max residual {worst:.2e}")


def check_root_points(mlp: Mlp, inputs: np.ndarray, patterns: PatternSet) -> CheckResult:
    worst, count = 0.0, 0
    for rule in DEEP_TAYLOR_RULES:
        for n, x in enumerate(inputs):
            trace = forward_trace(mlp, x)
            report = explain(mlp, x, n % mlp.output_dim, rule, patterns)
            for k, layer in enumerate(mlp.layers):
                weights_aug = augment_bias_as_input(layer)
                x_aug = augment_input(trace.layer_input(k))
                pattern = patterns.layers[k] if rule.requires_patterns else None
                for j, point in layer_root_points(rule, weights_aug, x_aug, report.layer_relevances[k + 1], pattern):
                    bound = np.linalg.norm(weights_aug[j]) * np.linalg.norm(x_aug)
                    worst = max(worst, abs(float(weights_aug[j] @ point.x_tilde)) / bound)
                    count += 1
    return CheckResult(name="root points lie on the hyperplane", passed=count > 0 and worst <= 1e-9,
                       detail=f"{count} neuron/sample pairs, max normalized |w.x~| {worst:.2e}")


def check_pattern_oracle(instances: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        dim, n = int(rng.integers(1, 6)), int(rng.integers(2, 21))
        X = rng.normal(size=(n, dim))
        w = rng.normal(size=dim)
        single_neuron = Mlp.from_layers([DenseLayer(weights=w[None, :], bias=np.zeros(1))])
        streamed = MomentAccumulator.empty(single_neuron)
        for x in X:
            accumulate(streamed, forward_trace(single_neuron, x))
        a_stream = finalize(streamed).layers[0][:, 0]

        X_aug, w_aug = augment_input(X), np.append(w, 0.0)
        covariance = X_aug.T @ X_aug
        a_dense = covariance @ w_aug / (w_aug @ covariance @ w_aug)
        worst = max(worst, float(np.max(np.abs(a_stream - a_dense))))
    return CheckResult(name="streaming pattern estimate", passed=worst <= 1e-10,
                       detail=f"{instances} instances, max deviation {worst:.2e}")


def check_generative_recovery() -> CheckResult:
    spec = GenerativeSpec.random(dim=20, distractors=5, sigma_eps=0.1, seed=0)
    report = pattern_vs_filter_demo(spec, 50000)
    diagnostics = report.diagnostics
    passed = (abs(diagnostics.task_gain - 1.0) <= 0.02 and diagnostics.max_leak <= 0.02
              and report.cosine_a_hat >= 0.99)
    return CheckResult(name="pattern recovery on the linear generative model", passed=passed,
                       detail=f"w.a_t={diagnostics.task_gain:.4f} max|w.A_n|={diagnostics.max_leak:.4f} "
                              f"cos(a_hat, a_t)={report.cosine_a_hat:.4f}")


def check_support(mlp: Mlp, inputs: np.ndarray, patterns: PatternSet) -> CheckResult:
    leaks = 0
    for rule in (Rule.Z, Rule.WPLUS, Rule.APLUS):
        for n, x in enumerate(inputs):
            relevance = explain(mlp, x, n % mlp.output_dim, rule, patterns).input_relevance
            leaks += int(np.count_nonzero(relevance[x == 0]))
    return CheckResult(name="zero inputs receive zero relevance", passed=leaks == 0,
                       detail=f"{leaks} zero-valued pixels with relevance under Z, WPlus, APlus")


def check_a_rule_independence(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    linear = Mlp.from_layers([DenseLayer(weights=rng.normal(size=(3, 8)), bias=rng.normal(size=3))])
    data = rng.normal(size=(500, 8))
    acc = accumulate(MomentAccumulator.empty(linear), forward_trace(linear, data))
    patterns = finalize(acc)

    reference, worst, used = None, 0.0, 0
    for x in rng.normal(size=(40, 8)):
        if used == 20:
            break
        if abs(forward(linear, x)[0]) < 1e-3:
            continue
        relevance = normalized_relevance(explain(linear, x, 0, Rule.A, patterns))
        if reference is None:
            reference = relevance
        worst = max(worst, float(np.max(np.abs(relevance - reference))))
        used += 1
    return CheckResult(name="a-rule relevance is input independent on a linear layer", passed=worst <= 1e-9,
                       detail=f"{used} inputs, max deviation {worst:.2e}")


def check_persistence(mlp: Mlp, patterns: PatternSet) -> CheckResult:
    model_bytes = mlp_to_bytes(mlp)
    pattern_bytes = patterns_to_bytes(patterns)
    stable = (mlp_to_bytes(mlp_from_bytes(model_bytes)) == model_bytes
              and patterns_to_bytes(patterns_from_bytes(pattern_bytes)) == pattern_bytes)
    return CheckResult(name="DTDN/DTDP round trip", passed=stable,
                       detail=f"{len(model_bytes)} model bytes, {len(pattern_bytes)} pattern bytes")


def check_corrupted_model(mlp: Mlp) -> CheckResult:
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.dtdn")
        save_mlp(mlp, path)
        with open(path, "r+b") as f:
            f.truncate(os.path.getsize(path) - 3)
        try:
            load_mlp(path)
        except ModelFormatError as e:
            return CheckResult(name="corrupted model is rejected", passed=True, detail=str(e))
    return CheckResult(name="corrupted model is rejected", passed=False, detail="truncated model loaded")


def check_heatmap_symmetry(seed: int = 0) -> CheckResult:
    relevance = np.random.default_rng(seed).normal(size=(28, 28))
    colors, mirrored = diverging_colors(relevance), diverging_colors(-relevance)
    exact = np.array_equal(colors[..., 0], mirrored[..., 2]) and np.array_equal(colors[..., 1], mirrored[..., 1])
    blank = np.all(diverging_colors(np.zeros((28, 28))) == 255)
    return CheckResult(name="heatmap colour symmetry", passed=bool(exact and blank),
                       detail="negation swaps red and blue, zero map is white")


def run_selftest(seed: int = 0) -> List[CheckResult]:
    mlp, inputs, patterns = _fixture(seed)
    sample = inputs[:20]
    checks: List[Tuple[str, Callable[[], CheckResult]]] = [
        ("finite-difference gradient", lambda: check_gradient(mlp, inputs)),
        ("z-rule equals gradient x input", lambda: check_z_equals_grad_times_input(mlp, inputs[:100])),
        ("relevance conservation", lambda: check_conservation_all(mlp, inputs[:100], patterns)),
        ("root points lie on the hyperplane", lambda: check_root_points(mlp, sample, patterns)),
        ("streaming pattern estimate", lambda: check_pattern_oracle(seed=seed)),
        ("pattern recovery on the linear generative model", check_generative_recovery),
        ("zero inputs receive zero relevance", lambda: check_support(mlp, sample, patterns)),
        ("a-rule relevance is input independent on a linear layer", lambda: check_a_rule_independence(seed)),
        ("DTDN/DTDP round trip", lambda: check_persistence(mlp, patterns)),
        ("corrupted model is rejected", lambda: check_corrupted_model(mlp)),
        ("heatmap colour symmetry", lambda: check_heatmap_symmetry(seed)),
    ]

    results = []
    for name, check in checks:
        try:
            result = check()
        except DtdError as e:
            result = CheckResult(name=name, passed=False,
                                 detail=f"{type(e).__name__}: {e}")
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"[{'PASS' if result.passed else 'FAIL'}] {result.name}: {result.detail}")
        results.append(result)
    return results


def summary(results: List[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.detail})" for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
