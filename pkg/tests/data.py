import os
import tempfile
import unittest

import numpy as np
import torch

from ..tools import analysis, data
from ..tools.data import DegradationSpec
from ..tools.errors import ConfigurationError, FormatError, ShapeError


class TestDegradationSpec(unittest.TestCase):
    def test_defaults_resolved(self):
        self.assertEqual(DegradationSpec().resolved(), {"sigma": 0.1})
        self.assertEqual(
            DegradationSpec(task="super_resolution", params={"factor": 4}).resolved(),
            {"factor": 4, "upsample": "bicubic"},
        )

    def test_unknown_task(self):
        with self.assertRaises(ConfigurationError) as e:
            DegradationSpec.from_dict({"task": "deblur"})

        self.assertEqual(e.exception.message, "Unknown task 'deblur'.")

    def test_invalid_params(self):
        for task, params in (
            ("denoise", {"sigma": -0.1}),
            ("super_resolution", {"upsample": "bilinear"}),
            ("low_light", {"gamma": 0.0}),
            ("haze", {"transmission": 0.0}),
            ("rain", {"length": 0}),
        ):
            with self.assertRaises(ConfigurationError):
                DegradationSpec(task=task, params=params)


class TestDegrade(unittest.TestCase):
    def setUp(self) -> None:
        self.clean = data.make_clean_image(16, 1, np.random.default_rng(0))

    def test_clean_image_range(self):
        self.assertEqual(self.clean.shape, (1, 16, 16))
        self.assertGreaterEqual(self.clean.min(), 0.2)
        self.assertLessEqual(self.clean.max(), 0.8)

    def test_zero_noise_is_identity(self):
        out = data.degrade(self.clean, DegradationSpec(params={"sigma": 0.0}))

        self.assertTrue(np.array_equal(out.numpy(), self.clean))

    def test_noise_is_seeded(self):
        spec = DegradationSpec(params={"sigma": 0.05}, seed=3)

        self.assertTrue(torch.equal(data.degrade(self.clean, spec), data.degrade(self.clean, spec)))

    def test_super_resolution_nearest(self):
        img = np.arange(16, dtype=np.float64).reshape(1, 4, 4) / 16.0
        out = data.degrade(img, DegradationSpec(task="super_resolution", params={"factor": 2, "upsample": "nearest"}))

        expected = img.reshape(1, 2, 2, 2, 2).mean(axis=(2, 4)).repeat(2, axis=1).repeat(2, axis=2)
        self.assertTrue(np.allclose(out.numpy(), expected))

    def test_super_resolution_bicubic_shape(self):
        out = data.degrade(self.clean, DegradationSpec(task="super_resolution"))

        self.assertEqual(tuple(out.shape), (1, 16, 16))
        self.assertTrue(bool((out >= 0).all() and (out <= 1).all()))

    def test_super_resolution_indivisible(self):
        with self.assertRaises(ShapeError):
            data.degrade(np.zeros((1, 5, 5)), DegradationSpec(task="super_resolution"))

    def test_low_light(self):
        out = data.degrade(self.clean, DegradationSpec(task="low_light", params={"gamma": 2.0, "gain": 1.0}))

        self.assertTrue(np.allclose(out.numpy(), self.clean**2))

    def test_haze(self):
        spec = DegradationSpec(task="haze", params={"transmission": 0.5, "airlight": 1.0})
        out = data.degrade(self.clean, spec)

        self.assertTrue(np.allclose(out.numpy(), 0.5 * self.clean + 0.5))

    def test_haze_cast_needs_channel_count(self):
        spec = DegradationSpec(task="haze", params={"cast": [1.0, 0.9, 0.8]})

        with self.assertRaises(ShapeError):
            data.degrade(self.clean, spec)

    def test_rain_only_brightens(self):
        out = data.degrade(self.clean, DegradationSpec(task="rain", params={"count": 10}))

        self.assertTrue(bool((out.numpy() >= self.clean - 1e-12).all()))
        self.assertGreater(float(out.sum()), float(self.clean.sum()))

    def test_rejects_rank_two(self):
        with self.assertRaises(ShapeError):
            data.degrade(np.zeros((4, 4)), DegradationSpec())


class TestDatasets(unittest.TestCase):
    def test_deterministic(self):
        spec = DegradationSpec()

        a = data.make_dataset(spec, 3, 8, seed=1)
        b = data.make_dataset(spec, 3, 8, seed=1)
        c = data.make_dataset(spec, 3, 8, seed=2)

        self.assertTrue(torch.equal(a.clean, b.clean) and torch.equal(a.degraded, b.degraded))
        self.assertFalse(torch.equal(a.clean, c.clean))

    def test_slices_regenerate(self):
        spec = DegradationSpec(task="rain")

        whole = data.make_dataset(spec, 4, 8, seed=5, channels=3)
        tail = data.make_dataset(spec, 2, 8, seed=5, channels=3, start=2)

        self.assertTrue(torch.equal(whole.degraded[2:], tail.degraded))

    def test_splits_disjoint(self):
        splits = data.make_splits(DegradationSpec(), 4, 2, 8, seed=0)

        self.assertEqual((len(splits.train), len(splits.test)), (4, 2))
        for test_img in splits.test.clean:
            for train_img in splits.train.clean:
                self.assertFalse(torch.equal(test_img, train_img))

    def test_denoise_input_psnr_near_noise_level(self):
        ds = data.make_dataset(DegradationSpec(params={"sigma": 0.1}), 16, 32, seed=0)
        values = [analysis.psnr(d, c) for d, c in zip(ds.degraded, ds.clean)]

        self.assertAlmostEqual(float(np.mean(values)), 10 * np.log10(1 / 0.1**2), delta=1.0)

    def test_empty_dataset(self):
        with self.assertRaises(ConfigurationError):
            data.make_dataset(DegradationSpec(), 0, 8, seed=0)


class TestTensorFile(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "t.tensor")

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_header_layout(self):
        data.save_tensor(self.path, np.ones((2, 3), dtype=np.float32))

        with open(self.path, "rb") as f:
            raw = f.read()

        self.assertEqual(raw[:8], b"ASVPTNSR")
        self.assertEqual(raw[8:12], b"\x01\x00\x02\x00")
        self.assertEqual(raw[12:20], b"\x02\x00\x00\x00\x03\x00\x00\x00")
        self.assertEqual(len(raw), 20 + 4 * 6)

    def test_float32_values_survive(self):
        values = torch.tensor([[0.5, -1.25], [3.0, 1e-3]], dtype=torch.float32).to(torch.float64)
        data.save_tensor(self.path, values)

        self.assertTrue(torch.equal(data.load_tensor(self.path), values))

    def test_rank_five_rejected(self):
        with self.assertRaises(ShapeError):
            data.save_tensor(self.path, np.zeros((1, 1, 1, 1, 1)))

    def test_truncated_payload(self):
        data.save_tensor(self.path, np.zeros((4, 4)))
        with open(self.path, "r+b") as f:
            f.truncate(20 + 4 * 15)

        with self.assertRaises(FormatError) as e:
            data.load_tensor(self.path)

        self.assertEqual(e.exception.detail, {"expected_bytes": 84, "actual_bytes": 80})

    def test_bad_magic(self):
        with open(self.path, "wb") as f:
            f.write(b"NOTATNSR" + b"\x01\x00\x01\x00" + b"\x01\x00\x00\x00" + b"\x00" * 4)

        with self.assertRaises(FormatError) as e:
            data.load_tensor(self.path)

        self.assertEqual(e.exception.message, "Bad TensorFile magic.")

    def test_short_header(self):
        with open(self.path, "wb") as f:
            f.write(b"ASVP")

        with self.assertRaises(FormatError):
            data.load_tensor(self.path)

    def test_dataset_round_trip(self):
        ds = data.make_dataset(DegradationSpec(), 2, 8, seed=0)
        paths = data.write_dataset(self.tmp.name, "train", ds)
        back = data.read_dataset(self.tmp.name, "train")

        self.assertTrue(os.path.isfile(paths["clean"]))
        self.assertTrue(torch.allclose(back.clean, ds.clean, atol=1e-7))

    def test_creates_missing_directories(self):
        path = os.path.join(self.tmp.name, "a", "b", "t.tensor")
        data.save_tensor(path, np.ones(3))

        self.assertEqual(tuple(data.load_tensor(path).shape), (3,))


if __name__ == "__main__":
    unittest.main()
