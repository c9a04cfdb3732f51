import unittest

import torch

from ..tools import defenses
from ..tools.defenses import DefenseContext, DefenseSpec
from ..tools.errors import ConfigurationError
from ..tools.tensor import DTYPE


def _feature(seed: int = 0, shape=(2, 8, 6, 6)) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


class TestDefenseSpec(unittest.TestCase):
    def test_labels(self):
        cases = [
            ({"kind": "none"}, "none"),
            ({"kind": "asvp", "params": {"h": 1e2, "k_ratio": 0.6}}, "asvp"),
            ({"kind": "asvp", "params": {"h": 1e2, "k_ratio": 0.6, "mode": "truncated"}}, "asvp-trunc"),
            ({"kind": "noise", "intensity": "low"}, "noise-L"),
            ({"kind": "noise", "intensity": "high"}, "noise-H"),
            ({"kind": "drop_channel", "intensity": "high"}, "dropC-H"),
            ({"kind": "adversarial", "intensity": "low"}, "adv-L"),
            ({"kind": "noise", "params": {"std": 0.1}}, "noise"),
            ({"kind": "asvp", "intensity": "high", "legacy": True}, "asvp-legacy"),
        ]

        for doc, label in cases:
            self.assertEqual(DefenseSpec.from_dict(doc).label, label)

    def test_presets_are_overridden(self):
        spec = DefenseSpec.from_dict({"kind": "noise", "intensity": "high", "params": {"rel_std": 0.3}})

        self.assertEqual(spec.resolved(), {"rel_std": 0.3})

    def test_asvp_preset(self):
        cfg = DefenseSpec(kind="asvp", intensity="high").asvp_config()

        self.assertEqual((cfg.h, cfg.k_ratio, cfg.mode), (1e3, 0.6, "full"))

    def test_asvp_missing_params(self):
        with self.assertRaises(ConfigurationError) as e:
            DefenseSpec(kind="asvp", params={"h": 2.0})

        self.assertEqual(e.exception.message, "ASVP defense needs 'h' and 'k_ratio'.")

    def test_unknown_kind(self):
        with self.assertRaises(ConfigurationError) as e:
            DefenseSpec.from_dict({"kind": "blur"})

        self.assertEqual(e.exception.message, "Unknown defense kind 'blur'.")

    def test_invalid_drop_rate(self):
        with self.assertRaises(ConfigurationError):
            DefenseSpec(kind="drop_channel", params={"p": 1.5})

    def test_negative_noise(self):
        with self.assertRaises(ConfigurationError):
            DefenseSpec(kind="noise", params={"std": -1.0})

    def test_custom_kinds_need_their_params(self):
        for kind in ("noise", "drop_channel", "adversarial"):
            with self.assertRaises(ConfigurationError) as e:
                DefenseSpec.from_dict({"kind": kind})

            self.assertIn(kind, e.exception.message)

    def test_presets_supply_params(self):
        x = _feature()
        ctx = DefenseContext(loss_tail=lambda f: torch.mean(f**2))

        for kind in ("noise", "drop_channel", "adversarial"):
            out = defenses.apply_defense(DefenseSpec.from_dict({"kind": kind, "intensity": "low"}), x, ctx)
            self.assertEqual(out.protected.shape, x.shape)

    def test_dict_round_trip(self):
        spec = DefenseSpec(kind="adversarial", intensity="low", params={"steps": 2}, seed=4)

        self.assertEqual(DefenseSpec.from_dict(spec.to_dict()), spec)


class TestNoise(unittest.TestCase):
    def test_zero_std_is_identity(self):
        x = _feature()

        self.assertTrue(torch.equal(defenses.gaussian_noise(x, 0.0, seed=1), x))

    def test_seeded(self):
        x = _feature()

        a = defenses.gaussian_noise(x, 0.5, seed=7)
        b = defenses.gaussian_noise(x, 0.5, seed=7)
        c = defenses.gaussian_noise(x, 0.5, seed=8)

        self.assertTrue(torch.equal(a, b))
        self.assertFalse(torch.equal(a, c))

    def test_energy_scales_with_variance(self):
        x = torch.zeros((4, 16, 16, 16), dtype=DTYPE)
        out = defenses.apply_defense(DefenseSpec(kind="noise", params={"std": 2.0}), x)

        self.assertAlmostEqual(out.energy / (4.0 * x.numel()), 1.0, delta=0.05)

    def test_negative_std(self):
        with self.assertRaises(ConfigurationError):
            defenses.gaussian_noise(_feature(), -0.1, seed=0)


class TestChannelDropout(unittest.TestCase):
    def test_extremes(self):
        x = _feature()

        self.assertTrue(torch.equal(defenses.channel_dropout(x, 0.0, seed=0), x))
        self.assertTrue(torch.equal(defenses.channel_dropout(x, 1.0, seed=0), torch.zeros_like(x)))

    def test_whole_channels_dropped_unscaled(self):
        x = _feature(shape=(3, 32, 4, 4))
        out = defenses.channel_dropout(x, 0.5, seed=3)

        for b in range(3):
            for c in range(32):
                kept = torch.equal(out[b, c], x[b, c])
                dropped = bool((out[b, c] == 0).all())
                self.assertTrue(kept or dropped)

    def test_dropped_count_within_binomial_bound(self):
        x = torch.ones((1, 64, 2, 2), dtype=DTYPE)
        counts = []

        for seed in range(1000):
            out = defenses.channel_dropout(x, 0.5, seed=seed)
            counts.append(int((out[0, :, 0, 0] == 0).sum()))

        inside = sum(18 <= c <= 46 for c in counts)
        self.assertGreaterEqual(inside / len(counts), 0.99)
        self.assertAlmostEqual(sum(counts) / len(counts), 32.0, delta=1.0)

    def test_rank_three(self):
        x = _feature(shape=(8, 4, 4))

        self.assertEqual(defenses.channel_dropout(x, 0.5, seed=0).shape, x.shape)

    def test_invalid_rate(self):
        with self.assertRaises(ConfigurationError):
            defenses.channel_dropout(_feature(), -0.1, seed=0)


class TestAdversarial(unittest.TestCase):
    def test_stays_in_ball(self):
        x = _feature()
        target = _feature(seed=1)
        out = defenses.adversarial_perturb(
            x, defenses.alignment_loss_tail(target), steps=5, step_size=0.05, eps=0.1
        )

        self.assertLessEqual(float((out - x).abs().max()), 0.1 + 1e-12)

    def test_increases_loss(self):
        x = _feature()
        tail = defenses.alignment_loss_tail(_feature(seed=1))
        out = defenses.adversarial_perturb(x, tail, steps=3, step_size=0.05, eps=0.15)

        self.assertGreater(float(tail(out)), float(tail(x)))

    def test_zero_steps_is_identity(self):
        x = _feature()
        out = defenses.adversarial_perturb(x, defenses.alignment_loss_tail(x), steps=0, step_size=0.1, eps=0.1)

        self.assertTrue(torch.equal(out, x))

    def test_zero_radius_is_identity(self):
        x = _feature()
        out = defenses.adversarial_perturb(x, defenses.alignment_loss_tail(_feature(seed=1)), steps=3, step_size=0.1, eps=0.0)

        self.assertTrue(torch.equal(out, x))

    def test_quadratic_ascent_recurrence(self):
        x = _feature()
        steps, step_size = 3, 0.09

        out = defenses.adversarial_perturb(
            x, lambda f: 0.5 * torch.sum(f**2), steps=steps, step_size=step_size, eps=0.3
        )

        # The gradient of |f|^2 / 2 is f itself, so every step moves away from zero.
        expected = x.clone()
        for _ in range(steps):
            expected = expected + step_size * torch.sign(expected)

        self.assertTrue(torch.allclose(out, expected, rtol=0.0, atol=1e-12))

    def test_needs_loss_tail(self):
        spec = DefenseSpec(kind="adversarial", intensity="low")

        with self.assertRaises(ConfigurationError):
            defenses.apply_defense(spec, _feature())


class TestApplyDefense(unittest.TestCase):
    def test_clean_path_is_input(self):
        x = _feature()
        copy = x.clone()
        ctx = DefenseContext(loss_tail=defenses.alignment_loss_tail(_feature(seed=1)))

        for doc in (
            {"kind": "none"},
            {"kind": "asvp", "intensity": "low"},
            {"kind": "noise", "intensity": "high"},
            {"kind": "drop_channel", "intensity": "high"},
            {"kind": "adversarial", "intensity": "low"},
        ):
            out = defenses.apply_defense(DefenseSpec.from_dict(doc), x, ctx)

            self.assertIs(out.clean, x)
            self.assertTrue(torch.equal(x, copy))

    def test_none_has_no_energy(self):
        x = _feature()
        out = defenses.apply_defense(DefenseSpec(), x)

        self.assertEqual(out.energy, 0.0)
        self.assertTrue(torch.equal(out.protected, x))

    def test_energy_is_distance(self):
        x = _feature()
        out = defenses.apply_defense(DefenseSpec(kind="drop_channel", params={"p": 0.5}, seed=2), x)

        self.assertAlmostEqual(out.energy, float(torch.sum((out.protected - x) ** 2)), places=9)

    def test_seed_offset_changes_draws(self):
        x = _feature()
        spec = DefenseSpec(kind="noise", params={"std": 1.0}, seed=5)

        a = defenses.apply_defense(spec, x, DefenseContext(seed_offset=0)).protected
        b = defenses.apply_defense(spec, x, DefenseContext(seed_offset=1)).protected
        self.assertFalse(torch.equal(a, b))


if __name__ == "__main__":
    unittest.main()
