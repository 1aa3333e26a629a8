"""Desk-scale reproduction of the N-body comparison.

Generates a reduced dataset, trains the deterministic EGNN, the K=3 deep
ensemble and P-EGNN for each seed, evaluates all three on the test split and
writes one CSV row per (model, seed) plus a comparison summary. Exits 1
when P-EGNN misses one of the desk-scale targets checked by
``pegnn.metrics.trend_checks``.

Run from the repository root:

    python scripts/reproduce_nbody.py --out runs/nbody --n-train 1000 --n-test 500 --seeds 0 1

Copyright (c) Bryn Gwalad 2025
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from dotenv import load_dotenv

load_dotenv()

from pegnn.config import load_config
from pegnn.metrics import EnsemblePredictor, NoisyPredictor, aggregate_reports, evaluate, trend_checks
from pegnn.nbody_sim import generate_dataset
from pegnn.training import network_config, train

logger = logging.getLogger("pegnn.reproduce")

MODELS = ("deterministic", "ensemble", "crps")


def run_protocol(run, seeds, k_eval=100, workers=1):
    """Train and evaluate every model for every seed.

    Returns the CSV rows and the MetricsReport list of each model.
    """
    sim = run.sim
    train_data = generate_dataset(sim, sim.n_train, split="train", workers=workers)
    val_data = generate_dataset(sim, sim.n_val, split="val", workers=workers)
    test_data = generate_dataset(sim, sim.n_test, split="test", workers=workers)
    rows, reports = [], {model: [] for model in MODELS}
    for seed in seeds:
        for model in MODELS:
            train_config = run.train.model_copy(update={"mode": model, "seed": seed}).check()
            config = network_config(run.model, train_config)
            states = train(run.model, train_config, train_data, val_data, workers=workers)
            members = [NoisyPredictor(s.best_params, config) for s in states]
            if model == "ensemble":
                report = evaluate(EnsemblePredictor(members), test_data, len(members), seed=seed)
            else:
                report = evaluate(members[0], test_data, k_eval if config.is_stochastic else 1, seed=seed)
            logger.info("seed %d %s: mse=%.4g crps=%.4g ssr=%s", seed, model, report.mse_of_mean, report.crps, report.ssr)
            reports[model].append(report)
            rows.append({"model": model, "seed": seed, "mse": report.mse_of_mean, "crps": report.crps, "ssr": report.ssr})
    return rows, reports


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=None, help="flat key-value config file")
    p.add_argument("--out", default="runs/nbody", help="output directory")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--K", type=int, default=100, help="evaluation samples for P-EGNN")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()

    if not logging.getLogger().handlers:
        logging.basicConfig(level=os.getenv("LOG_LEVEL", "INFO").upper())

    run = load_config(args.config)
    run.sim = run.sim.model_copy(update={"n_train": args.n_train, "n_test": args.n_test})
    rows, reports = run_protocol(run, args.seeds, k_eval=args.K, workers=args.workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "reproduce.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model", "seed", "mse", "crps", "ssr"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    summary = {model: aggregate_reports(reports[model]) for model in MODELS}
    for model, values in summary.items():
        ssr = f"{values.ssr_mean:.4g}" if values.ssr_mean is not None else "-"
        print(f"{model:<14} mse={values.mse_of_mean_mean:.4g}  crps={values.crps_mean:.4g}  ssr={ssr}")
    print(f"Wrote {out / 'reproduce.csv'}")

    checks = trend_checks(summary["deterministic"], summary["ensemble"], summary["crps"])
    for name, passed in checks.items():
        print(f"{'ok  ' if passed else 'FAIL'} {name}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
