import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from src.cli.selftest import central_difference_gradient, fixture_network
from src.errors import RejectedInputError
from src.network.mlp import (
    Activation,
    DenseLayer,
    Mlp,
    augment_bias_as_input,
    augment_input,
    augmented_pre_activation,
    build_mlp,
    forward,
    forward_trace,
    input_gradient,
    predict,
)


class TestMlp(unittest.TestCase):
    def setUp(self):
        self.mlp = fixture_network(seed=3)
        self.x = np.random.default_rng(3).uniform(0.0, 1.0, self.mlp.input_dim)

    def test_build_mlp_layout(self):
        mlp = build_mlp([784, 200, 10], seed=0)
        self.assertEqual(mlp.layer_sizes, [784, 200, 10])
        self.assertIs(mlp.layers[0].activation, Activation.RELU)
        self.assertIs(mlp.layers[1].activation, Activation.IDENTITY)
        limit = np.sqrt(6.0 / (784 + 200))
        self.assertLessEqual(np.abs(mlp.layers[0].weights).max(), limit)
        assert_array_equal(mlp.layers[0].bias, np.zeros(200))

    def test_build_mlp_is_deterministic(self):
        a, b = build_mlp([5, 4, 3], seed=7), build_mlp([5, 4, 3], seed=7)
        for la, lb in zip(a.layers, b.layers):
            assert_array_equal(la.weights, lb.weights)

    def test_rejects_broken_chain(self):
        first = DenseLayer(weights=np.ones((3, 4)), bias=np.zeros(3), activation=Activation.RELU)
        second = DenseLayer(weights=np.ones((2, 5)), bias=np.zeros(2))
        with self.assertRaises(ValidationError):
            Mlp.from_layers([first, second])

    def test_rejects_relu_output(self):
        layer = DenseLayer(weights=np.ones((2, 3)), bias=np.zeros(2), activation=Activation.RELU)
        with self.assertRaises(ValidationError):
            Mlp.from_layers([layer])

    def test_rejects_non_finite_parameters(self):
        with self.assertRaises(ValidationError):
            DenseLayer(weights=[[np.nan, 1.0]], bias=[0.0])

    def test_parameters_are_read_only(self):
        with self.assertRaises(ValueError):
            self.mlp.layers[0].weights[0, 0] = 1.0

    def test_forward_matches_manual_computation(self):
        hidden = self.x
        for layer in self.mlp.layers[:-1]:
            hidden = np.maximum(layer.weights @ hidden + layer.bias, 0.0)
        last = self.mlp.layers[-1]
        assert_allclose(forward(self.mlp, self.x), last.weights @ hidden + last.bias, rtol=1e-12)

    def test_batch_trace_matches_single_traces(self):
        X = np.random.default_rng(4).uniform(size=(5, self.mlp.input_dim))
        batch = forward_trace(self.mlp, X)
        self.assertTrue(batch.is_batch)
        for n in range(5):
            assert_allclose(batch.logits[n], forward(self.mlp, X[n]), rtol=1e-12, atol=1e-14)

    def test_trace_records_every_layer(self):
        trace = forward_trace(self.mlp, self.x)
        self.assertEqual(len(trace.pre_activations), len(self.mlp.layers))
        assert_array_equal(trace.layer_input(0), self.x)
        assert_array_equal(trace.layer_input(1), np.maximum(trace.pre_activations[0], 0.0))

    def test_forward_rejects_bad_input(self):
        with self.assertRaises(RejectedInputError):
            forward(self.mlp, np.zeros(self.mlp.input_dim + 1))
        bad = self.x.copy()
        bad[0] = np.inf
        with self.assertRaises(RejectedInputError):
            forward(self.mlp, bad)

    def test_input_gradient_matches_central_differences(self):
        trace = forward_trace(self.mlp, self.x)
        for target in range(self.mlp.output_dim):
            numeric = central_difference_gradient(lambda v: float(forward(self.mlp, v)[target]), self.x)
            assert_allclose(input_gradient(self.mlp, trace, target), numeric, atol=1e-6)

    def test_input_gradient_rejects_bad_target(self):
        trace = forward_trace(self.mlp, self.x)
        with self.assertRaises(RejectedInputError):
            input_gradient(self.mlp, trace, self.mlp.output_dim)

    def test_augmented_pre_activation_is_bitwise_equal(self):
        layer = self.mlp.layers[0]
        z = augmented_pre_activation(augment_bias_as_input(layer), augment_input(self.x))
        assert_array_equal(z, layer.weights @ self.x + layer.bias)

    def test_augmented_view_matches_explicit_bias_on_random_layers(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            fan_in, fan_out = int(rng.integers(1, 30)), int(rng.integers(1, 30))
            layer = DenseLayer(weights=rng.normal(size=(fan_out, fan_in)), bias=rng.normal(size=fan_out))
            x = rng.normal(size=fan_in)
            assert_array_equal(augmented_pre_activation(augment_bias_as_input(layer), augment_input(x)),
                               layer.pre_activation(x))

    def test_logits_are_affine_along_a_line_with_fixed_mask(self):
        rng = np.random.default_rng(12)
        checked = 0
        for _ in range(20):
            x, delta = rng.uniform(size=self.mlp.input_dim), rng.normal(size=self.mlp.input_dim)
            points = [x + t * 1e-3 * delta for t in (0.0, 0.5, 1.0)]
            masks = [[z > 0 for z in forward_trace(self.mlp, p).pre_activations[:-1]] for p in points]
            if not all(np.array_equal(a, b) for m in masks[1:] for a, b in zip(masks[0], m)):
                continue
            z0, z_half, z1 = (forward(self.mlp, p) for p in points)
            assert_allclose(z_half, (z0 + z1) / 2, rtol=0, atol=1e-9)
            checked += 1
        self.assertGreater(checked, 0)

    def test_augment_input_batch(self):
        X = np.zeros((3, 2))
        assert_array_equal(augment_input(X)[:, -1], np.ones(3))

    def test_predict_breaks_ties_toward_lowest_index(self):
        layer = DenseLayer(weights=np.zeros((3, 2)), bias=np.array([1.0, 1.0, 0.0]))
        mlp = Mlp.from_layers([layer])
        self.assertEqual(int(predict(mlp, np.zeros(2))), 0)


if __name__ == "__main__":
    unittest.main()
