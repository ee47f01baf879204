import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from src.cli.selftest import central_difference_gradient
from src.dataio.dataset import Dataset
from src.dataio.synthetic import gaussian_blobs
from src.errors import EmptyDatasetError, RejectedInputError
from src.network.mlp import build_mlp
from src.network.persistence import mlp_to_bytes
from src.network.train import TrainConfig, accuracy, softmax_cross_entropy, train


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.data = gaussian_blobs(200, [[-2.0, -2.0], [2.0, 2.0]], std=0.5, seed=0)
        self.cfg = TrainConfig(learning_rate=0.1, epochs=20, batch_size=16, seed=1)

    def test_learns_separable_blobs(self):
        mlp, history = train(build_mlp([2, 16, 2], seed=0), self.data, self.cfg)
        self.assertEqual(len(history), 20)
        self.assertGreaterEqual(accuracy(mlp, self.data), 0.95)
        self.assertLess(history[-1].loss, history[0].loss)

    def test_zero_epochs_returns_untouched_model(self):
        start = build_mlp([2, 16, 2], seed=0)
        mlp, history = train(start, self.data, self.cfg.model_copy(update={"epochs": 0}))
        self.assertEqual(history, [])
        self.assertEqual(mlp_to_bytes(mlp), mlp_to_bytes(start))

    def test_same_seed_gives_identical_bytes(self):
        cfg = self.cfg.model_copy(update={"epochs": 3})
        a, _ = train(build_mlp([2, 16, 2], seed=0), self.data, cfg)
        b, _ = train(build_mlp([2, 16, 2], seed=0), self.data, cfg)
        self.assertEqual(mlp_to_bytes(a), mlp_to_bytes(b))

    def test_batch_order_seed_matters(self):
        a, _ = train(build_mlp([2, 16, 2], seed=0), self.data, self.cfg.model_copy(update={"epochs": 1}))
        b, _ = train(build_mlp([2, 16, 2], seed=0), self.data, self.cfg.model_copy(update={"epochs": 1, "seed": 2}))
        self.assertNotEqual(mlp_to_bytes(a), mlp_to_bytes(b))

    def test_input_model_is_not_modified(self):
        start = build_mlp([2, 16, 2], seed=0)
        before = mlp_to_bytes(start)
        train(start, self.data, self.cfg.model_copy(update={"epochs": 2}))
        self.assertEqual(mlp_to_bytes(start), before)

    def test_softmax_cross_entropy_gradient(self):
        rng = np.random.default_rng(0)
        logits, labels = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])
        loss, grad = softmax_cross_entropy(logits, labels)
        self.assertGreater(loss, 0.0)
        numeric = central_difference_gradient(
            lambda flat: softmax_cross_entropy(flat.reshape(4, 3), labels)[0], logits.ravel()
        ).reshape(4, 3)
        assert_allclose(grad, numeric, atol=1e-7)
        assert_allclose(grad.sum(axis=1), np.zeros(4), atol=1e-12)

    def test_rejects_labels_outside_outputs(self):
        data = Dataset(images=np.zeros((3, 2)), labels=[0, 1, 5])
        with self.assertRaises(RejectedInputError):
            train(build_mlp([2, 4, 2], seed=0), data, self.cfg)

    def test_rejects_feature_mismatch(self):
        with self.assertRaises(RejectedInputError):
            train(build_mlp([3, 4, 2], seed=0), self.data, self.cfg)

    def test_empty_dataset(self):
        empty = Dataset(images=np.zeros((0, 2)), labels=np.zeros(0))
        with self.assertRaises(EmptyDatasetError):
            train(build_mlp([2, 4, 2], seed=0), empty, self.cfg)
        with self.assertRaises(EmptyDatasetError):
            accuracy(build_mlp([2, 4, 2], seed=0), empty)

    def test_history_reports_accuracy(self):
        _, history = train(build_mlp([2, 16, 2], seed=0), self.data, self.cfg.model_copy(update={"epochs": 2}))
        assert_array_equal([s.epoch for s in history], [1, 2])
        self.assertTrue(all(0.0 <= s.accuracy <= 1.0 for s in history))


if __name__ == "__main__":
    unittest.main()
