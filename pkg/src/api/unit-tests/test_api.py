import json
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose
from pydantic import ValidationError

from src.api.api import app, data_format, explain_image, health, list_artifacts, numerical, rejected_input
from src.api.models import ExplainRequest
from src.cli.commands import Experiment
from src.cli.config import ExperimentConfig
from src.cli.selftest import fixture_network
from src.dataio.synthetic import unit_box_images
from src.errors import (
    ArtifactMissingError,
    DegenerateDenominatorError,
    ModelFormatError,
    RejectedInputError,
    SingularityError,
)
from src.network.persistence import save_mlp
from src.patterns.moments import estimate_patterns
from src.patterns.persistence import save_patterns
from src.relevance.explain import explain
from src.relevance.rules import Rule


class TestApi(unittest.IsolatedAsyncioTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = ExperimentConfig(out_dir=self.tmp.name, noise_levels=[0.0, 0.4])
        self.mlp = fixture_network(seed=1)
        self.patterns = estimate_patterns(self.mlp, unit_box_images(100, 16, classes=4, seed=1))
        save_mlp(self.mlp, self.config.model_path(0.0))
        save_patterns(self.patterns, self.config.patterns_path(0.0))
        app.state.experiment = Experiment(self.config)
        self.pixels = np.random.default_rng(1).uniform(size=16)

    def tearDown(self):
        self.tmp.cleanup()

    async def test_health(self):
        response = await health()
        self.assertEqual((response.status, response.out_dir), ("ok", self.tmp.name))

    async def test_artifacts(self):
        listed = await list_artifacts()
        self.assertEqual([(a.sigma, a.model, a.patterns) for a in listed], [(0.0, True, True), (0.4, False, False)])

    async def test_explain_raw_pixels(self):
        response = await explain_image(ExplainRequest(rule="aplus", pixels=self.pixels.tolist(), target=2))
        expected = explain(self.mlp, self.pixels, 2, Rule.APLUS, self.patterns)
        self.assertEqual(response.rule, "APlus")
        assert_allclose(response.relevance, expected.input_relevance, rtol=0, atol=0)
        self.assertAlmostEqual(response.bias_relevance, expected.total_bias_relevance)
        self.assertLessEqual(response.conservation_residual, 1e-9)
        self.assertEqual(len(response.layer_totals), len(self.mlp.layers) + 1)

    async def test_explain_errors(self):
        with self.assertRaises(ArtifactMissingError):
            await explain_image(ExplainRequest(sigma=0.4, pixels=self.pixels.tolist(), target=0))
        with self.assertRaises(RejectedInputError):
            await explain_image(ExplainRequest(sigma=0.3, pixels=self.pixels.tolist(), target=0))
        with self.assertRaises(RejectedInputError):
            await explain_image(ExplainRequest(rule="nope", pixels=self.pixels.tolist(), target=0))
        with self.assertRaises(RejectedInputError):
            await explain_image(ExplainRequest(pixels=[0.0, 1.0], target=0))

    def test_request_validation(self):
        with self.assertRaises(ValidationError):
            ExplainRequest()
        with self.assertRaises(ValidationError):
            ExplainRequest(index=1, pixels=[0.0])
        with self.assertRaises(ValidationError):
            ExplainRequest(pixels=[0.0])

    async def test_error_mapping(self):
        cases = [
            (rejected_input, RejectedInputError("bad"), 400),
            (data_format, ArtifactMissingError("gone"), 404),
            (data_format, ModelFormatError("broken"), 400),
        ]
        for handler, exc, status in cases:
            response = await handler(None, exc)
            self.assertEqual(response.status_code, status)
            self.assertEqual(json.loads(response.body)["error"], type(exc).__name__)

    async def test_numerical_errors_map_to_422(self):
        class FakeRequest:
            class url:
                path = "/api/explain"

        response = await numerical(FakeRequest(), SingularityError("singular"))
        self.assertEqual(response.status_code, 422)
        self.assertEqual(json.loads(response.body)["context"], {"path": "/api/explain"})

        response = await numerical(FakeRequest(), DegenerateDenominatorError("A", 1, 7, 0.0))
        context = json.loads(response.body)["context"]
        self.assertEqual(context, {"path": "/api/explain", "rule": "A", "layer": "1", "neuron": "7"})


if __name__ == "__main__":
    unittest.main()
