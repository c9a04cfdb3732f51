import math
import unittest

import numpy as np
import torch
from scipy import signal

from ..tools import analysis
from ..tools.errors import ShapeError
from ..tools.tensor import DTYPE


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _reference_ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    window = _gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(z: np.ndarray) -> np.ndarray:
        return signal.correlate2d(z, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b

    m = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(m.mean())


def _constant_ssim(c: float, d: float, peak: float = 1.0) -> float:
    c1 = (0.01 * peak) ** 2
    return (2 * c * (c + d) + c1) / (c**2 + (c + d) ** 2 + c1)


class TestPSNR(unittest.TestCase):
    def test_identical_is_capped(self):
        x = torch.rand((1, 8, 8), dtype=DTYPE)

        self.assertEqual(analysis.psnr(x, x), 99.0)

    def test_known_value(self):
        a = torch.zeros((1, 4, 4), dtype=DTYPE)
        b = torch.full((1, 4, 4), 0.1, dtype=DTYPE)

        self.assertAlmostEqual(analysis.psnr(a, b), 20.0, places=9)

    def test_unit_error_at_8_bit_peak(self):
        a = torch.full((1, 6, 6), 100.0, dtype=DTYPE)
        b = torch.full((1, 6, 6), 101.0, dtype=DTYPE)

        self.assertAlmostEqual(analysis.psnr(a, b, peak=255.0), 48.1308, places=4)

    def test_zero_output_against_half_grey(self):
        a = torch.zeros((1, 8, 8), dtype=DTYPE)
        b = torch.full((1, 8, 8), 0.5, dtype=DTYPE)

        self.assertAlmostEqual(analysis.psnr(a, b), 10 * math.log10(4.0), places=9)

    def test_matches_naive_definition(self):
        rng = np.random.default_rng(3)

        for _ in range(50):
            a, b = rng.uniform(0.0, 1.0, (2, 1, 9, 9))
            expected = 10 * math.log10(1.0 / np.mean((a - b) ** 2))

            value = analysis.psnr(torch.from_numpy(a), torch.from_numpy(b))
            self.assertAlmostEqual(value, expected, delta=1e-8)
            self.assertEqual(value, analysis.psnr(torch.from_numpy(b), torch.from_numpy(a)))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            analysis.psnr(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


class TestSSIM(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(0)
        self.a = rng.uniform(0.0, 1.0, (24, 20))
        self.b = np.clip(self.a + rng.normal(0.0, 0.1, self.a.shape), 0.0, 1.0)

    def test_identical_is_one(self):
        x = torch.from_numpy(self.a)

        self.assertAlmostEqual(analysis.ssim(x, x), 1.0, places=12)

    def test_matches_reference(self):
        value = analysis.ssim(torch.from_numpy(self.a), torch.from_numpy(self.b))

        self.assertAlmostEqual(value, _reference_ssim(self.a, self.b), places=10)

    def test_random_pairs_match_reference(self):
        rng = np.random.default_rng(7)

        for _ in range(50):
            a, b = rng.uniform(0.0, 1.0, (2, 32, 32))
            value = analysis.ssim(torch.from_numpy(a), torch.from_numpy(b))

            self.assertAlmostEqual(value, _reference_ssim(a, b), delta=1e-8)

    def test_symmetric(self):
        a, b = torch.from_numpy(self.a), torch.from_numpy(self.b)

        self.assertAlmostEqual(analysis.ssim(a, b), analysis.ssim(b, a), places=12)

    def test_constant_images_closed_form(self):
        for size in (16, 6):
            a = torch.full((1, size, size), 0.4, dtype=DTYPE)
            b = torch.full((1, size, size), 0.55, dtype=DTYPE)

            self.assertAlmostEqual(analysis.ssim(a, b), _constant_ssim(0.4, 0.15), places=10)

    def test_channels_averaged(self):
        a = torch.from_numpy(np.stack([self.a, self.b]))
        b = torch.from_numpy(np.stack([self.b, self.b]))

        expected = (_reference_ssim(self.a, self.b) + 1.0) / 2
        self.assertAlmostEqual(analysis.ssim(a, b), expected, places=10)

    def test_small_images_use_global_window(self):
        x = torch.from_numpy(self.a[:8, :8])
        y = torch.from_numpy(self.b[:8, :8])

        result = analysis.structural_similarity(x, y)
        self.assertTrue(result.global_window)
        self.assertLess(result.value, 1.0)

    def test_full_size_images_use_local_windows(self):
        result = analysis.structural_similarity(torch.from_numpy(self.a), torch.from_numpy(self.b))

        self.assertFalse(result.global_window)


class TestFeatureReport(unittest.TestCase):
    def test_parseval(self):
        x = torch.randn((1, 4, 12, 10), generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        report = analysis.feature_report(x)

        energy = float(report.energy_map.sum())
        self.assertAlmostEqual(float(report.radial_power.sum()) / (12 * 10 * energy), 1.0, places=9)
        self.assertAlmostEqual(energy, float(torch.sum(x**2)), places=9)

    def test_constant_map_is_low_frequency(self):
        report = analysis.feature_report(torch.full((2, 8, 8), 3.0, dtype=DTYPE))

        self.assertAlmostEqual(report.high_frequency_fraction, 0.0, places=12)
        self.assertAlmostEqual(float(report.radial_power[0]) / (2 * (64 * 3.0) ** 2), 1.0, places=12)
        self.assertAlmostEqual(float(report.radial_power[1:].sum()), 0.0, places=6)

    def test_checkerboard_is_high_frequency(self):
        idx = torch.arange(8)
        board = ((idx[:, None] + idx[None, :]) % 2 * 2 - 1).to(DTYPE)
        report = analysis.feature_report(board[None])

        self.assertAlmostEqual(report.high_frequency_fraction, 1.0, places=9)

    def test_histogram_and_range(self):
        x = torch.linspace(-2.0, 1.0, 64, dtype=DTYPE).reshape(1, 8, 8)
        report = analysis.feature_report(x)

        self.assertEqual(len(report.histogram), analysis.HISTOGRAM_BINS)
        self.assertEqual(int(report.histogram.sum()), 64)
        self.assertEqual((report.value_min, report.value_max), (-2.0, 1.0))
        self.assertEqual(report.max_abs, 2.0)

    def test_first_batch_element_and_channel(self):
        x = torch.randn((3, 2, 6, 6), generator=torch.Generator().manual_seed(2), dtype=DTYPE)
        report = analysis.feature_report(x, channel=1)

        self.assertTrue(torch.equal(report.grid, x[0, 1]))
        self.assertEqual(report.channel, 1)

    def test_band_layout(self):
        bands = analysis.radius_bands(5, 5)

        self.assertEqual(int(bands[2, 2]), 0)
        self.assertEqual(int(bands[0, 0]), round(math.sqrt(8)))

    def test_channel_out_of_range(self):
        with self.assertRaises(ShapeError):
            analysis.feature_report(torch.zeros((2, 4, 4), dtype=DTYPE), channel=2)

    def test_rank_two_rejected(self):
        with self.assertRaises(ShapeError):
            analysis.feature_report(torch.zeros((4, 4), dtype=DTYPE))


if __name__ == "__main__":
    unittest.main()
