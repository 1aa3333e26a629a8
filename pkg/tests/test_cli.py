"""End-to-end tests of the pegnn command line on a toy configuration.

Copyright (c) Bryn Gwalad 2025
"""

# Ensure the project root is on sys.path so tests can be executed directly from
# the `tests/` directory (e.g. `python test_cli.py`).
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import contextlib
import csv
import io
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

TOY = """SCHEMA_VERSION=1
SIM_N_PARTICLES=3
SIM_N_STEPS=10
SIM_N_TRAIN=8
SIM_N_TEST=6
SIM_SEED=5
MODEL_N_LAYERS=1
MODEL_HIDDEN_WIDTH=8
MODEL_NOISE_DIM=2
TRAIN_EPOCHS={epochs}
TRAIN_BATCH_SIZE=4
TRAIN_K_TRAIN={k_train}
TRAIN_K_VAL=3
TRAIN_LEARNING_RATE=0.001
TRAIN_LR_MIN=0.001
TRAIN_ENSEMBLE_SIZE=3
"""


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls._registry = os.environ.get("PEGNN_REGISTRY_FILE")
        os.environ["PEGNN_REGISTRY_FILE"] = str(cls.root / "runs.db")
        cls.config = cls.write_config("toy.env")
        cls.data = cls.root / "data"
        code, _ = cls.run_cli("generate", "--config", str(cls.config), "--out", str(cls.data))
        assert code == 0, "toy dataset generation failed"

    @classmethod
    def tearDownClass(cls):
        if cls._registry is None:
            os.environ.pop("PEGNN_REGISTRY_FILE", None)
        else:
            os.environ["PEGNN_REGISTRY_FILE"] = cls._registry
        cls.tmp.cleanup()

    @classmethod
    def write_config(cls, name, epochs=2, k_train=2, extra=""):
        path = cls.root / name
        path.write_text(TOY.format(epochs=epochs, k_train=k_train) + extra, encoding="utf-8")
        return path

    @staticmethod
    def run_cli(*argv):
        from pegnn.cli import main

        out = io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
            code = main(list(argv))
        return code, out.getvalue()

    def read_csv(self, path):
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def train(self, out, mode, config=None, *extra):
        return self.run_cli(
            "train", "--config", str(config or self.config), "--data", str(self.data), "--out", str(out), "--mode", mode, *extra
        )

    def test_params_table(self):
        code, text = self.run_cli("params")
        self.assertEqual(code, 0)
        self.assertIn("134,024", text)
        self.assertIn("402,072", text)
        self.assertIn("151,432", text)
        self.assertIn("1.13x", text)
        self.assertIn("3.00x", text)
        self.assertIn("17,408", text)

    def test_generate_writes_splits_and_manifest(self):
        for split in ("train", "val", "test"):
            self.assertTrue((self.data / f"{split}.bin").exists())
        manifest = json.loads((self.data / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["status"], "ok")
        self.assertEqual(manifest["exit_code"], 0)
        self.assertEqual(manifest["config"]["SIM_N_PARTICLES"], "3")

    def test_generate_is_reproducible(self):
        again = self.root / "data_again"
        code, _ = self.run_cli("generate", "--config", str(self.config), "--out", str(again))
        self.assertEqual(code, 0)
        for split in ("train", "val", "test"):
            self.assertEqual((again / f"{split}.bin").read_bytes(), (self.data / f"{split}.bin").read_bytes())

    def test_missing_config_exits_2(self):
        out = self.root / "missing"
        code, _ = self.run_cli("generate", "--config", str(self.root / "nope.env"), "--out", str(out))
        self.assertEqual(code, 2)
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["status"], "failed")
        self.assertEqual(manifest["error"]["type"], "ConfigError")

    def test_crps_override_with_one_draw_exits_2(self):
        config = self.write_config("one_draw.env", k_train=1)
        code, _ = self.train(self.root / "one_draw", "crps", config)
        self.assertEqual(code, 2)

    def test_missing_data_exits_3(self):
        code, _ = self.run_cli(
            "train", "--config", str(self.config), "--data", str(self.root / "empty"), "--out", str(self.root / "nodata")
        )
        self.assertEqual(code, 3)

    def test_deterministic_train_and_evaluate(self):
        out = self.root / "det"
        code, _ = self.train(out, "deterministic")
        self.assertEqual(code, 0)
        ckpt = out / "checkpoints" / "member_00.ckpt"
        self.assertTrue(ckpt.exists())
        log = self.read_csv(out / "train_log.csv")
        self.assertEqual([row["epoch"] for row in log], ["0", "1"])
        self.assertEqual({row["wall_time_s"] for row in log}, {"0.0"})

        evals = []
        for name in ("eval_a", "eval_b"):
            code, text = self.run_cli("evaluate", "--checkpoint", str(ckpt), "--test", str(self.data / "test.bin"), "--out", str(self.root / name))
            self.assertEqual(code, 0)
            evals.append((self.root / name / "metrics.csv").read_bytes())
        self.assertEqual(evals[0], evals[1])
        rows = self.read_csv(self.root / "eval_a" / "metrics.csv")
        self.assertNotIn("ssr", rows[0])
        self.assertNotIn("spearman_rho", rows[0])
        self.assertEqual(rows[0]["k_eval"], "1")
        self.assertEqual(rows[0]["n_test"], "6")

    def test_checkpoint_config_mismatch_exits_5(self):
        out = self.root / "det_mismatch"
        self.assertEqual(self.train(out, "deterministic")[0], 0)
        wide = self.write_config("wide.env", extra="MODEL_HIDDEN_WIDTH=9\n")
        code, _ = self.run_cli(
            "evaluate",
            "--checkpoint", str(out / "checkpoints" / "member_00.ckpt"),
            "--test", str(self.data / "test.bin"),
            "--out", str(self.root / "eval_mismatch"),
            "--config", str(wide),
        )
        self.assertEqual(code, 5)

    def test_baselines_evaluate_against_a_noisy_config(self):
        noisy_config = self.write_config("noisy.env", extra="TRAIN_MODE=crps\n")
        for mode in ("deterministic", "ensemble"):
            out = self.root / f"{mode}_checked"
            self.assertEqual(self.train(out, mode, noisy_config)[0], 0)
            code, _ = self.run_cli(
                "evaluate",
                "--checkpoint", str(out / "checkpoints"),
                "--test", str(self.data / "test.bin"),
                "--out", str(self.root / f"eval_{mode}_checked"),
                "--config", str(noisy_config),
            )
            self.assertEqual(code, 0, mode)

        out = self.root / "crps_checked"
        self.assertEqual(self.train(out, "crps", noisy_config)[0], 0)
        code, _ = self.run_cli(
            "evaluate",
            "--checkpoint", str(out / "checkpoints" / "member_00.ckpt"),
            "--test", str(self.data / "test.bin"),
            "--out", str(self.root / "eval_crps_checked"),
            "--config", str(noisy_config),
            "--K", "3",
        )
        self.assertEqual(code, 0)

    def test_noisy_model_with_several_seeds(self):
        out = self.root / "crps"
        self.assertEqual(self.train(out, "crps")[0], 0)
        log = self.read_csv(out / "train_log.csv")
        self.assertTrue(all(row["passes"] == str(8 * 2) for row in log))
        code, text = self.run_cli(
            "evaluate",
            "--checkpoint", str(out / "checkpoints" / "member_00.ckpt"),
            "--test", str(self.data / "test.bin"),
            "--out", str(self.root / "eval_crps"),
            "--K", "4",
            "--seeds", "0", "1",
        )
        self.assertEqual(code, 0)
        rows = self.read_csv(self.root / "eval_crps" / "metrics.csv")
        self.assertEqual([r["seed"] for r in rows], ["0", "1", "mean", "std"])
        self.assertIn("ssr", rows[0])
        self.assertEqual(rows[0]["k_eval"], "4")
        self.assertIn("K=4", text)

    def test_resume_matches_uninterrupted_run(self):
        three = self.write_config("three.env", epochs=3)
        straight, first, resumed = self.root / "straight", self.root / "first", self.root / "resumed"
        self.assertEqual(self.train(straight, "crps", three)[0], 0)
        self.assertEqual(self.train(first, "crps")[0], 0)
        self.assertEqual(self.train(resumed, "crps", three, "--resume", str(first / "state"))[0], 0)
        from pegnn.storage import read_checkpoint

        _, a, _ = read_checkpoint(straight / "state" / "state_00.ckpt")
        _, b, _ = read_checkpoint(resumed / "state" / "state_00.ckpt")
        for name in ("params", "best_params", "adam_m", "adam_v"):
            np.testing.assert_array_equal(a[name], b[name])
        self.assertEqual(
            (straight / "train_log.csv").read_bytes(),
            (resumed / "train_log.csv").read_bytes(),
        )

    def test_ensemble_directory_evaluates_with_member_count(self):
        out = self.root / "ens"
        self.assertEqual(self.train(out, "ensemble")[0], 0)
        ckpts = sorted((out / "checkpoints").glob("*.ckpt"))
        self.assertEqual([p.name for p in ckpts], ["member_00.ckpt", "member_01.ckpt", "member_02.ckpt"])
        code, _ = self.run_cli(
            "evaluate", "--checkpoint", str(out / "checkpoints"), "--test", str(self.data / "test.bin"), "--out", str(self.root / "eval_ens")
        )
        self.assertEqual(code, 0)
        rows = self.read_csv(self.root / "eval_ens" / "metrics.csv")
        self.assertEqual(rows[0]["k_eval"], "3")
        self.assertIn("ssr", rows[0])

    def test_runs_are_registered(self):
        from utils.database import list_runs

        self.run_cli("params")
        commands = [r.command for r in list_runs()]
        self.assertIn("generate", commands)
        self.assertIn("params", commands)
        self.assertTrue(all(r.status in ("ok", "failed") for r in list_runs()))


if __name__ == "__main__":
    unittest.main()
