import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
from numpy.testing import assert_allclose
from PIL import Image

from src.cli.commands import (
    Experiment,
    cmd_explain,
    cmd_grid,
    cmd_patterns,
    cmd_synth,
    cmd_train,
    explain_test_image,
    find_artifacts,
)
from src.cli.config import ExperimentConfig
from src.cli.heatmap import HeatmapStyle
from src.dataio.idx import write_idx_images, write_idx_labels
from src.errors import ArtifactMissingError, FingerprintMismatchError, RejectedInputError
from src.main import main
from src.network.train import TrainConfig
from src.relevance.rules import Rule


def write_digits(directory: str, name: str, count: int, seed: int):
    """Tiny 4x4 'digits': class k lights up pixel k (and a few random ones)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    pixels = np.zeros((count, 16), dtype=np.uint8)
    pixels[np.arange(count), labels] = 255
    pixels[rng.uniform(size=(count, 16)) < 0.2] = rng.integers(50, 200)
    images_path, labels_path = os.path.join(directory, f"{name}-images"), os.path.join(directory, f"{name}-labels")
    write_idx_images(images_path, pixels.reshape(count, 4, 4))
    write_idx_labels(labels_path, labels)
    return images_path, labels_path


class TestCommands(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        train_images, train_labels = write_digits(cls.tmp.name, "train", 120, seed=0)
        test_images, test_labels = write_digits(cls.tmp.name, "test", 30, seed=1)
        cls.config = ExperimentConfig(
            mnist_images=train_images,
            mnist_labels=train_labels,
            mnist_test_images=test_images,
            mnist_test_labels=test_labels,
            out_dir=os.path.join(cls.tmp.name, "out"),
            noise_levels=[0.0, 0.2],
            hidden_units=8,
            train=TrainConfig(learning_rate=0.1, epochs=3, batch_size=16),
            style=HeatmapStyle(scale=2),
        )
        cls.metrics = cmd_train(cls.config)
        cls.summaries = cmd_patterns(cls.config)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def read(self, path: str) -> bytes:
        with open(path, "rb") as f:
            return f.read()

    def test_train_writes_models_and_metrics(self):
        self.assertEqual([m.sigma for m in self.metrics], [0.0, 0.2])
        for sigma in (0.0, 0.2):
            self.assertTrue(os.path.exists(self.config.model_path(sigma)))
        with open(self.config.metrics_path()) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[2].startswith("0.20 "))

    def test_training_is_reproducible(self):
        other = self.config.model_copy(update={"out_dir": os.path.join(self.tmp.name, "rerun"), "noise_levels": [0.2]})
        cmd_train(other)
        self.assertEqual(self.read(other.model_path(0.2)), self.read(self.config.model_path(0.2)))

    def test_patterns_are_written_per_arm(self):
        self.assertEqual([s.sigma for s in self.summaries], [0.0, 0.2])
        for summary in self.summaries:
            self.assertTrue(os.path.exists(summary.path))
            self.assertGreaterEqual(summary.degenerate_neurons, 0)
        self.assertEqual(find_artifacts(self.config), {0.0: {"model": True, "patterns": True},
                                                       0.2: {"model": True, "patterns": True}})

    def test_explain_writes_csv_and_images(self):
        prefix = os.path.join(self.tmp.name, "explain", "a")
        result = cmd_explain(self.config, 0.2, 3, Rule.APLUS, out_path=prefix)
        self.assertEqual(result.target, 3)
        self.assertLessEqual(result.conservation_residual, 1e-9)
        with open(result.csv_path) as f:
            self.assertEqual(f.readline().strip(), "# rule=APlus,sigma=0.2,target=3,index=3")
        self.assertEqual(np.loadtxt(result.csv_path, delimiter=",").shape, (4, 4))
        self.assertEqual([os.path.splitext(p)[1] for p in result.image_paths], [".png", ".pgm"])

    def test_z_rule_matches_gradient_times_input_on_disk(self):
        z_rule = cmd_explain(self.config, 0.0, 5, Rule.Z, out_path=os.path.join(self.tmp.name, "explain", "z"))
        gxi = cmd_explain(self.config, 0.0, 5, Rule.GRAD_TIMES_INPUT,
                          out_path=os.path.join(self.tmp.name, "explain", "gxi"))
        a = np.loadtxt(z_rule.csv_path, delimiter=",")
        b = np.loadtxt(gxi.csv_path, delimiter=",")
        assert_allclose(a, b, rtol=0, atol=1e-8 * max(np.abs(b).max(), 1e-300))

    def test_explain_guards(self):
        with self.assertRaises(RejectedInputError):
            cmd_explain(self.config, 0.0, 30, Rule.Z)
        with self.assertRaises(FingerprintMismatchError):
            cmd_explain(self.config, 0.0, 0, Rule.A, patterns_path=self.config.patterns_path(0.2))
        with self.assertRaises(RejectedInputError):
            cmd_explain(self.config, 0.4, 0, Rule.Z)
        wider = self.config.model_copy(update={"noise_levels": [0.0, 0.2, 0.4]})
        with self.assertRaises(ArtifactMissingError):
            cmd_explain(wider, 0.4, 0, Rule.Z)

    def test_unknown_noise_level_builds_no_test_split(self):
        experiment = Experiment(self.config)
        for sigma in (0.3, 0.31, 0.32):
            with self.assertRaises(RejectedInputError):
                explain_test_image(experiment, sigma, 0, Rule.Z)
        self.assertEqual(experiment._cache, {})
        report, _ = explain_test_image(experiment, 0.1 + 0.1, 0, Rule.Z)
        self.assertEqual(report.target, 0)

    def test_patterns_rerun_keeps_current_files_and_replaces_broken_ones(self):
        path = self.config.patterns_path(0.0)
        original = self.read(path)
        stamp = os.stat(path).st_mtime_ns
        cmd_patterns(self.config)
        self.assertEqual(os.stat(path).st_mtime_ns, stamp)

        with open(path, "r+b") as f:
            f.truncate(10)
        summaries = cmd_patterns(self.config)
        self.assertEqual(self.read(path), original)
        self.assertEqual([s.sigma for s in summaries], [0.0, 0.2])
        self.assertFalse(os.path.exists(f"{path}.tmp"))

    def test_fig1_grid(self):
        result = cmd_grid(self.config, "fig1")
        self.assertEqual((result.rows, result.cols), (4, 2))
        first = self.read(result.path)
        cmd_grid(self.config, "fig1")
        self.assertEqual(self.read(result.path), first)
        with Image.open(result.path) as image:
            style = self.config.style
            cell = 4 * style.scale + style.padding
            self.assertEqual(image.size, (style.label_width + 2 * cell + style.padding,
                                          style.label_height + 4 * cell + style.padding))

    def test_fig2_grid(self):
        result = cmd_grid(self.config, "fig2")
        self.assertEqual((result.rows, result.cols), (10, 4))
        self.assertTrue(result.path.endswith("fig2.png"))

    def test_grid_needs_artifacts(self):
        empty = self.config.model_copy(update={"out_dir": os.path.join(self.tmp.name, "empty")})
        with self.assertRaises(ArtifactMissingError):
            cmd_grid(empty, "fig1")
        with self.assertRaises(RejectedInputError):
            cmd_grid(self.config, "fig3")

    def test_synth(self):
        out = os.path.join(self.tmp.name, "synth")
        table = cmd_synth(out, dim=6, distractors=2, sigma_eps=0.1, samples=2000, write_csv=True)
        with open(os.path.join(out, "synth.txt")) as f:
            self.assertEqual(f.read(), table)
        with open(os.path.join(out, "synth.csv")) as f:
            self.assertEqual(len(f.read().splitlines()), 7)


class TestMain(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.env = patch.dict(os.environ, {"DTD_LOG_FILE": os.path.join(self.tmp.name, "dtd.log")})
        self.env.start()

    def tearDown(self):
        self.env.stop()
        self.tmp.cleanup()

    def test_usage_errors_exit_with_one(self):
        with self.assertRaises(SystemExit) as ctx:
            main(["explain"])
        self.assertEqual(ctx.exception.code, 1)
        with self.assertRaises(SystemExit) as ctx:
            main(["grid", "--grid-mode", "fig9"])
        self.assertEqual(ctx.exception.code, 1)

    def test_bad_synth_flags_exit_with_one(self):
        for flags in (["--dim", "0"], ["--noise-scale", "-1"], ["--distractors", "-1"], ["--samples", "many"]):
            with self.assertRaises(SystemExit) as ctx:
                main(["synth", "--out", self.tmp.name, *flags])
            self.assertEqual(ctx.exception.code, 1, flags)
        with self.assertRaises(RejectedInputError):
            cmd_synth(self.tmp.name, dim=0)
        with self.assertRaises(RejectedInputError):
            cmd_synth(self.tmp.name, dim=4, distractors=-1)

    def test_missing_data_exits_with_two(self):
        missing = os.path.join(self.tmp.name, "absent")
        code = main(["train", "--mnist-images", missing, "--mnist-labels", missing, "--out", self.tmp.name])
        self.assertEqual(code, 2)

    def test_singular_synth_exits_with_three(self):
        code = main(["synth", "--out", self.tmp.name, "--dim", "4", "--distractors", "0",
                     "--noise-scale", "0", "--samples", "100"])
        self.assertEqual(code, 3)

    def test_synth_succeeds(self):
        code = main(["synth", "--out", self.tmp.name, "--dim", "4", "--distractors", "1", "--samples", "500"])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, "synth.txt")))


if __name__ == "__main__":
    unittest.main()
