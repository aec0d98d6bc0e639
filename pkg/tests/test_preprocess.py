"""
Tests for Otsu thresholding, breast localization and raster normalization.
"""

import sys
import unittest
from fractions import Fraction
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from mammo_multiview.config.settings import PreprocessConfig
from mammo_multiview.core.errors import DegenerateImageError, IntegrityError
from mammo_multiview.core.imaging import BoundingBox, GrayImage
from mammo_multiview.core.preprocess import (
    breast_roi,
    intensity_bins,
    otsu_threshold,
    preprocess_image,
    resize_bilinear,
)


def between_class_variance(values, t):
    """Exact between-class variance of the split {v < t} / {v >= t}, or None if one side is empty."""
    lower = [v for v in values if v < t]
    upper = [v for v in values if v >= t]
    if not lower or not upper:
        return None
    total = len(values)
    w0, w1 = Fraction(len(lower), total), Fraction(len(upper), total)
    mu0, mu1 = Fraction(sum(lower), len(lower)), Fraction(sum(upper), len(upper))
    return w0 * w1 * (mu0 - mu1) ** 2


def otsu_oracle(image: GrayImage):
    """Exhaustive search with exact rational arithmetic; returns (lowest best t, its variance)."""
    values = intensity_bins(image).ravel().tolist()
    best_t, best_var = None, None
    for t in range(1, 256):
        var = between_class_variance(values, t)
        if var is not None and (best_var is None or var > best_var):
            best_t, best_var = t, var
    return best_t, best_var


def rectangle_image(width=80, height=100, box=(10, 20, 50, 70), value=200, background=0):
    pixels = np.full((height, width), background, dtype=np.uint8)
    x0, y0, x1, y1 = box
    pixels[y0:y1, x0:x1] = value
    return GrayImage.from_array(pixels)


class TestOtsu(unittest.TestCase):
    """Test cases for otsu_threshold."""

    def test_matches_exhaustive_oracle(self):
        """The threshold reaches the exact maximum variance at the start of its run of empty bins."""
        rng = np.random.default_rng(11)
        for i in range(200):
            if i % 2:
                pixels = rng.integers(0, 256, size=(9, 7))
            else:
                # bimodal images with a few distinct levels produce exact ties
                levels = rng.choice(256, size=rng.integers(2, 6), replace=False)
                pixels = rng.choice(levels, size=(9, 7))
                if np.unique(pixels).size < 2:
                    pixels[0, 0], pixels[0, 1] = levels[0], levels[1]
            image = GrayImage.from_array(pixels)
            values = intensity_bins(image).ravel().tolist()
            t = otsu_threshold(image)
            _, best_var = otsu_oracle(image)
            self.assertEqual(between_class_variance(values, t), best_var)
            self.assertIn(t - 1, values)

    def test_two_levels_pick_lowest_threshold(self):
        """Two levels split right above the darker one."""
        self.assertEqual(otsu_threshold(rectangle_image()), 1)

    def test_bimodal(self):
        """A bimodal image splits between its modes."""
        pixels = np.concatenate([np.full(50, 40), np.full(50, 180)]).reshape(10, 10)
        t = otsu_threshold(GrayImage.from_array(pixels))
        self.assertTrue(40 < t <= 180)

    def test_constant_image(self):
        """A single intensity level cannot be thresholded."""
        with self.assertRaises(DegenerateImageError):
            otsu_threshold(GrayImage.from_array(np.full((5, 5), 9)))

    def test_sixteen_bit_uses_high_byte(self):
        """Sixteen-bit images are thresholded on their high byte."""
        pixels = np.zeros((4, 4), dtype=np.uint16)
        pixels[:2] = 50000
        image = GrayImage.from_array(pixels, 16)
        self.assertEqual(otsu_threshold(image), 1)
        self.assertEqual(int(intensity_bins(image).max()), 50000 >> 8)

    def test_sixteen_bit_random_matches_oracle(self):
        """Random 16-bit images agree with the exhaustive search."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            image = GrayImage.from_array(rng.integers(0, 65536, size=(8, 8)).astype(np.uint16), 16)
            values = intensity_bins(image).ravel().tolist()
            self.assertEqual(between_class_variance(values, otsu_threshold(image)), otsu_oracle(image)[1])


class TestBreastRoi(unittest.TestCase):
    """Test cases for breast_roi."""

    def test_padded_rectangle(self):
        """The box is padded by two percent per side."""
        box = breast_roi(rectangle_image())
        # 2% of a 40 x 50 box rounds to one pixel on each side
        self.assertEqual(box.as_tuple(), (9, 19, 51, 71))

    def test_no_padding(self):
        """Zero padding gives the component bounds."""
        box = breast_roi(rectangle_image(), pad_fraction=0.0)
        self.assertEqual(box.as_tuple(), (10, 20, 50, 70))

    def test_padding_clamped_to_image(self):
        """Padding never leaves the image."""
        box = breast_roi(rectangle_image(box=(0, 0, 80, 60)), pad_fraction=0.1)
        self.assertEqual(box.as_tuple(), (0, 0, 80, 66))

    def test_largest_component_wins(self):
        """The largest component is kept even when a smaller one is brighter."""
        pixels = np.zeros((60, 60), dtype=np.uint8)
        pixels[5:10, 5:10] = 220
        pixels[20:50, 25:55] = 200
        box = breast_roi(GrayImage.from_array(pixels), pad_fraction=0.0)
        self.assertEqual(box.as_tuple(), (25, 20, 55, 50))

    def test_diagonal_pixels_are_separate_components(self):
        """Diagonal neighbours are not connected."""
        pixels = np.zeros((10, 10), dtype=np.uint8)
        pixels[2:4, 2:4] = 200
        pixels[4:7, 4:7] = 200
        box = breast_roi(GrayImage.from_array(pixels), pad_fraction=0.0)
        self.assertEqual(box.as_tuple(), (4, 4, 7, 7))


class TestPreprocessImage(unittest.TestCase):
    """Test cases for preprocess_image."""

    def setUp(self):
        """Set up test fixtures."""
        self.cfg = PreprocessConfig(target_height=32, target_width=24)

    def test_output_shape_and_range(self):
        """The raster has the target shape and lies in [0, 1]."""
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 30, size=(100, 80))
        pixels[20:70, 10:50] += 150
        raster = preprocess_image(GrayImage.from_array(pixels), self.cfg)
        self.assertEqual(raster.shape, (32, 24))
        self.assertGreaterEqual(raster.min(), 0.0)
        self.assertLessEqual(raster.max(), 1.0)

    def test_constant_crop_gives_zeros(self):
        """A constant crop logs a warning and gives zeros."""
        image = rectangle_image()
        with self.assertLogs("mammo_multiview.core.preprocess", level="WARNING"):
            raster = preprocess_image(image, self.cfg, roi=BoundingBox(15, 25, 45, 65))
        self.assertEqual(raster.shape, (32, 24))
        self.assertFalse(raster.any())

    def test_roi_override(self):
        """A supplied ROI bypasses detection."""
        pixels = np.tile(np.arange(80, dtype=np.uint8), (100, 1))
        raster = preprocess_image(GrayImage.from_array(pixels), self.cfg, roi=BoundingBox(0, 0, 80, 100))
        # left-to-right ramp stays monotone after resizing
        self.assertTrue(np.all(np.diff(raster[0]) >= 0))
        self.assertLess(raster[0, 0], 0.05)
        self.assertGreater(raster[0, -1], 0.95)

    def test_roi_outside_image(self):
        """An ROI past the image edge is an integrity error."""
        with self.assertRaises(IntegrityError):
            preprocess_image(rectangle_image(), self.cfg, roi=BoundingBox(0, 0, 81, 10))


class TestResize(unittest.TestCase):
    """Test cases for resize_bilinear."""

    def test_identity(self):
        """Resizing to the same shape is the identity."""
        grid = np.random.default_rng(1).random((6, 4))
        np.testing.assert_allclose(resize_bilinear(grid, 6, 4), grid)

    def test_constant_preserved(self):
        """A constant grid stays constant."""
        np.testing.assert_allclose(resize_bilinear(np.full((5, 7), 0.25), 11, 3), 0.25, atol=1e-6)


if __name__ == "__main__":
    unittest.main()
