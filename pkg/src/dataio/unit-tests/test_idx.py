import os
import struct
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from src.dataio.dataset import load_mnist
from src.dataio.idx import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    load_idx_images,
    load_idx_labels,
    write_idx_images,
    write_idx_labels,
)
from src.errors import (
    ArtifactMissingError,
    DataFormatError,
    EmptyDatasetError,
    IdxDimensionError,
    IdxLabelRangeError,
    IdxMagicError,
    IdxTruncatedError,
)


class TestIdx(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.pixels = np.arange(3 * 4 * 5, dtype=np.uint8).reshape(3, 4, 5)
        self.images = self.path("images.idx3")
        self.labels = self.path("labels.idx1")
        write_idx_images(self.images, self.pixels)
        write_idx_labels(self.labels, [7, 0, 9])

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.tmp.name, name)

    def write(self, name: str, data: bytes) -> str:
        with open(self.path(name), "wb") as f:
            f.write(data)
        return self.path(name)

    def test_load_images(self):
        raw = load_idx_images(self.images)
        self.assertEqual((raw.rows, raw.cols), (4, 5))
        assert_array_equal(raw.pixels, self.pixels.reshape(3, 20))

    def test_load_labels(self):
        labels = load_idx_labels(self.labels)
        self.assertEqual(labels.dtype, np.int64)
        assert_array_equal(labels, [7, 0, 9])

    def test_swapped_magic(self):
        with self.assertRaises(IdxMagicError):
            load_idx_images(self.labels)
        with self.assertRaises(IdxMagicError):
            load_idx_labels(self.images)

    def test_truncated_header_and_payload(self):
        with self.assertRaises(IdxTruncatedError):
            load_idx_images(self.write("short.idx3", struct.pack(">2I", IDX_IMAGE_MAGIC, 1)))
        with self.assertRaises(IdxTruncatedError):
            load_idx_images(self.write("cut.idx3", struct.pack(">4I", IDX_IMAGE_MAGIC, 2, 2, 2) + bytes(7)))
        with self.assertRaises(IdxTruncatedError):
            load_idx_labels(self.write("cut.idx1", struct.pack(">2I", IDX_LABEL_MAGIC, 5) + bytes(4)))

    def test_trailing_bytes(self):
        with self.assertRaises(IdxDimensionError):
            load_idx_images(self.write("long.idx3", struct.pack(">4I", IDX_IMAGE_MAGIC, 1, 2, 2) + bytes(5)))

    def test_zero_dimensions(self):
        with self.assertRaises(IdxDimensionError):
            load_idx_images(self.write("flat.idx3", struct.pack(">4I", IDX_IMAGE_MAGIC, 1, 0, 28)))

    def test_empty_files(self):
        with self.assertRaises(EmptyDatasetError):
            load_idx_images(self.write("none.idx3", struct.pack(">4I", IDX_IMAGE_MAGIC, 0, 28, 28)))
        with self.assertRaises(EmptyDatasetError):
            load_idx_labels(self.write("none.idx1", struct.pack(">2I", IDX_LABEL_MAGIC, 0)))

    def test_label_out_of_range(self):
        write_idx_labels(self.path("bad.idx1"), [1, 10, 2])
        with self.assertRaises(IdxLabelRangeError):
            load_idx_labels(self.path("bad.idx1"))

    def test_missing_file(self):
        with self.assertRaises(ArtifactMissingError):
            load_idx_images(self.path("absent"))

    def test_load_mnist_scales_and_keeps_shape(self):
        dataset = load_mnist(self.images, self.labels)
        self.assertEqual(dataset.image_shape, (4, 5))
        self.assertEqual(dataset.images.max(), 59 / 255.0)
        self.assertEqual(dataset.images[0, 0], 0.0)
        self.assertEqual(dataset.noise_sigma, 0.0)

    def test_load_mnist_count_mismatch(self):
        write_idx_labels(self.path("two.idx1"), [1, 2])
        with self.assertRaises(DataFormatError):
            load_mnist(self.images, self.path("two.idx1"))


if __name__ == "__main__":
    unittest.main()
