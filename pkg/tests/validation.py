import json
import os
import unittest

from ..tools import validate
from ..tools.config import ExperimentConfig
from ..tools.validate import ConfigValidators, OutputValidators, ValidationError

MINIMAL = {"task": {"task": "denoise"}}


class TestConfigValidation(unittest.TestCase):
    def test_minimal_config(self):
        validate.document(MINIMAL, ConfigValidators.EXPERIMENT)

    def test_missing_task(self):
        with self.assertRaises(ValidationError) as e:
            validate.document({"seed": 1}, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.message,
            "Failed to validate document against the experiment schema.",
        )
        self.assertEqual(
            e.exception.error_thrown["message"],  # type: ignore
            "'task' is a required property",
        )

    def test_unknown_top_level_key(self):
        with self.assertRaises(ValidationError) as e:
            validate.document({**MINIMAL, "bogus": 1}, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.error_thrown["message"],  # type: ignore
            "Additional properties are not allowed ('bogus' was unexpected)",
        )

    def test_unknown_nested_key_reports_path(self):
        doc = {**MINIMAL, "teacher": {"train": {"epochs": 2, "momentum": 0.9}}}

        with self.assertRaises(ValidationError) as e:
            validate.document(doc, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.error_thrown["instance_path"],  # type: ignore
            ["teacher", "train"],
        )

    def test_bad_value_reports_path(self):
        doc = {**MINIMAL, "student": {"train": {"epochs": 0}}}

        with self.assertRaises(ValidationError) as e:
            validate.document(doc, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.error_thrown["instance_path"],  # type: ignore
            ["student", "train", "epochs"],
        )

    def test_unknown_task(self):
        with self.assertRaises(ValidationError) as e:
            validate.document({"task": {"task": "blur"}}, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.error_thrown["instance_path"],  # type: ignore
            ["task", "task"],
        )

    def test_defense_list(self):
        doc = {
            **MINIMAL,
            "defenses": [
                {"kind": "none"},
                {"kind": "noise", "intensity": "low", "seed": 4},
                {"kind": "asvp", "params": {"h": 100.0, "k_ratio": 0.6, "mode": "truncated"}},
                {"kind": "adversarial", "intensity": "high", "legacy": True},
            ],
        }

        validate.document(doc, ConfigValidators.EXPERIMENT)

    def test_unknown_defense_param(self):
        doc = {**MINIMAL, "defenses": [{"kind": "asvp", "params": {"beta": 1}}]}

        with self.assertRaises(ValidationError) as e:
            validate.document(doc, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.error_thrown["instance_path"],  # type: ignore
            ["defenses", 0, "params"],
        )

    def test_custom_defense_without_params(self):
        for kind in ("asvp", "noise", "drop_channel", "adversarial"):
            doc = {**MINIMAL, "defenses": [{"kind": kind}]}

            with self.assertRaises(ValidationError) as e:
                validate.document(doc, ConfigValidators.EXPERIMENT)

            self.assertEqual(
                e.exception.error_thrown["instance_path"],  # type: ignore
                ["defenses", 0],
            )

    def test_custom_defense_missing_its_param(self):
        doc = {**MINIMAL, "defenses": [{"kind": "noise", "params": {"p": 0.2}}]}

        with self.assertRaises(ValidationError) as e:
            validate.document(doc, ConfigValidators.EXPERIMENT)

        self.assertEqual(
            e.exception.error_thrown["instance_path"],  # type: ignore
            ["defenses", 0, "params"],
        )

    def test_preset_defense_needs_no_params(self):
        for kind in ("asvp", "noise", "drop_channel", "adversarial"):
            doc = {**MINIMAL, "defenses": [{"kind": kind, "intensity": "high"}]}
            validate.document(doc, ConfigValidators.EXPERIMENT)

    def test_taps_as_stage_or_indices(self):
        for taps in ("early", [0, 2]):
            doc = {**MINIMAL, "student": {"train": {"taps": taps}}}
            validate.document(doc, ConfigValidators.EXPERIMENT)

    def test_effective_config_echo_is_valid(self):
        doc = {
            **MINIMAL,
            "seed": 5,
            "defenses": [{"kind": "drop_channel", "intensity": "high"}],
            "sweep": {"h": [10.0, 100.0], "k_ratio": [0.6]},
            "analysis": {"taps": [1]},
        }
        echo = ExperimentConfig.from_dict(doc).to_dict()

        validate.document(echo, ConfigValidators.EXPERIMENT)

    def test_bundled_experiment_configs(self):
        directory = os.path.join(os.path.dirname(__file__), "..", "experiments")

        for name in sorted(os.listdir(directory)):
            with open(os.path.join(directory, name)) as f:
                doc = json.load(f)

            validate.document(doc, ConfigValidators.EXPERIMENT)
            self.assertTrue(ExperimentConfig.from_dict(doc).defenses)

    def test_validation_error_is_a_config_error(self):
        self.assertEqual(ValidationError("bad", "detail").exit_code, 2)


class TestOutputValidation(unittest.TestCase):
    def test_checkpoint_manifest(self):
        manifest = {
            "arch": {"channels": 4},
            "seed": 0,
            "parameters": [{"name": "head.weight", "shape": [4, 1, 3, 3]}],
            "sha256": "0" * 64,
        }

        validate.document(manifest, OutputValidators.CHECKPOINT)

    def test_checkpoint_manifest_bad_hash(self):
        manifest = {"arch": {}, "seed": 0, "parameters": [], "sha256": "abc"}

        with self.assertRaises(ValidationError) as e:
            validate.document(manifest, OutputValidators.CHECKPOINT)

        self.assertEqual(
            e.exception.error_thrown["instance_path"],  # type: ignore
            ["sha256"],
        )

    def test_healthcheck_result(self):
        result = {"tests_passed": True, "successes": [], "failures": [], "errors": []}

        validate.document(result, OutputValidators.HEALTHCHECK)

    def test_run_record_requires_losses(self):
        with self.assertRaises(ValidationError) as e:
            validate.document({"label": "none"}, OutputValidators.RUN_RECORD)

        self.assertEqual(
            e.exception.message,
            "Failed to validate document against the run_record schema.",
        )


if __name__ == "__main__":
    unittest.main()
