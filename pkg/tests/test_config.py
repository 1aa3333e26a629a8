"""Tests for config file parsing and validation.

Copyright (c) Bryn Gwalad 2025
"""

# Ensure the project root is on sys.path so tests can be executed directly from
# the `tests/` directory (e.g. `python test_config.py`).
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import tempfile
import unittest
from pathlib import Path

from pegnn.config import flatten_config, load_config, parse_config, write_config
from pegnn.errors import ConfigError


class ConfigTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = self.dir / "run.env"
        path.write_text(text, encoding="utf-8")
        return path

    def test_defaults(self):
        run = load_config(None, environ={})
        self.assertEqual(run.sim.n_particles, 5)
        self.assertEqual(run.sim.n_steps, 1000)
        self.assertEqual(run.sim.n_val, 100)
        self.assertEqual(run.model.n_layers, 4)
        self.assertEqual(run.model.hidden_width, 64)
        self.assertEqual(run.model.noise_dim, 32)
        self.assertEqual(run.train.mode, "crps")
        self.assertEqual(run.train.k_train, 10)
        self.assertEqual(run.train.learning_rate, 5e-4)

    def test_file_values(self):
        path = self.write(
            "SCHEMA_VERSION=1\n"
            "# toy run\n"
            "SIM_N_PARTICLES=3\n"
            "SIM_CHARGE_VALUES=-1,0.5,1\n"
            "MODEL_HIDDEN_WIDTH=16\n"
            "TRAIN_MODE=deterministic\n"
            "TRAIN_GRAD_CLIP_NORM=none\n"
        )
        run = load_config(path, environ={})
        self.assertEqual(run.sim.n_particles, 3)
        self.assertEqual(run.sim.charge_values, [-1.0, 0.5, 1.0])
        self.assertEqual(run.model.hidden_width, 16)
        self.assertEqual(run.train.mode, "deterministic")
        self.assertIsNone(run.train.grad_clip_norm)

    def test_environment_overrides_file(self):
        path = self.write("MODEL_NOISE_DIM=8\n")
        run = load_config(path, environ={"MODEL_NOISE_DIM": "4", "UNRELATED": "x"})
        self.assertEqual(run.model.noise_dim, 4)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(self.write("MODEL_DEPTH=3\n"), environ={})
        self.assertEqual(ctx.exception.exit_code, 2)
        self.assertEqual(ctx.exception.context["key"], "MODEL_DEPTH")

    def test_schema_version(self):
        with self.assertRaises(ConfigError):
            load_config(self.write("SCHEMA_VERSION=2\n"), environ={})

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(self.dir / "absent.env", environ={})

    def test_crps_needs_two_training_draws(self):
        with self.assertRaises(ConfigError):
            parse_config({"TRAIN_MODE": "crps", "TRAIN_K_TRAIN": "1"})
        run = parse_config({"TRAIN_MODE": "deterministic", "TRAIN_K_TRAIN": "1"})
        self.assertEqual(run.train.k_train, 1)

    def test_ensemble_needs_two_members(self):
        with self.assertRaises(ConfigError):
            parse_config({"TRAIN_MODE": "ensemble", "TRAIN_ENSEMBLE_SIZE": "1"})

    def test_bad_values(self):
        for key, raw in (
            ("SIM_N_PARTICLES", "five"),
            ("SIM_N_PARTICLES", "1"),
            ("SIM_DT", "-0.1"),
            ("SIM_CHARGE_VALUES", "a,b"),
            ("TRAIN_MODE", "bayesian"),
            ("MODEL_NOISE_GENERATOR_INIT", "orthogonal"),
        ):
            with self.subTest(key=key, raw=raw), self.assertRaises(ConfigError):
                parse_config({key: raw})

    def test_written_config_loads_back(self):
        run = parse_config({"SIM_N_PARTICLES": "4", "TRAIN_SEED": "9", "TRAIN_GRAD_CLIP_NORM": "none"})
        path = self.dir / "saved.env"
        write_config(run, path)
        again = load_config(path, environ={})
        self.assertEqual(again, run)
        self.assertEqual(flatten_config(again)["TRAIN_GRAD_CLIP_NORM"], "none")


if __name__ == "__main__":
    unittest.main()
