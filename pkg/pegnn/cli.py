"""Command-line entry point.

Usage::

    python -m pegnn.cli generate --config C --out DIR [--workers W]
    python -m pegnn.cli train    --config C --data DIR --out DIR [--seed S] [--mode M] [--resume PATH]
    python -m pegnn.cli evaluate --checkpoint PATH [PATH ...] --test FILE --out DIR [--K 100] [--seeds 0 1] [--point]
    python -m pegnn.cli params   [--config C] [--ensemble-size 3]
    python -m pegnn.cli sweep    --config C --out DIR [--sizes 1000 3000 10000] [--seeds 0 1 2 3] [--jobs J]

Exit codes: 0 ok, 1 other failure, 2 config, 3 I/O, 4 divergence,
5 checkpoint/config mismatch. Every command that has an output directory
writes ``manifest.json`` there before it starts working, and every command
appends a row to the run registry.

Copyright (c) Bryn Gwalad 2025
"""

import argparse
import csv
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from . import __version__
from .config import flatten_config, load_config
from .egnn_core import empty_params, param_count
from .errors import CompatibilityError, ConfigError, DivergenceError, PegnnError, StorageError
from .metrics import (
    EnsemblePredictor,
    NoisyPredictor,
    PointPredictor,
    evaluate,
    format_report,
    write_metrics_csv,
)
from .models import EgnnConfig, RunConfig, RunManifest, TrainConfig, utcnow
from .nbody_sim import generate_dataset, split_sizes
from .storage import read_checkpoint, read_dataset, write_checkpoint, write_dataset
from .training import TrainState, network_config, train, write_log

# The run registry lives beside the package in the repository root.
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from utils.database import log_run  # noqa: E402

logger = logging.getLogger("pegnn.cli")

SWEEP_MODELS = ("deterministic", "ensemble", "crps")
SWEEP_COLUMNS = ("n", "model", "seed", "mse", "crps", "ssr")


def _version() -> str:
    """``git describe`` of the working tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_manifest(manifest: RunManifest, path: Optional[Path]) -> None:
    if path is None:
        return
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}", path=str(path)) from exc


def _jsonable(args: argparse.Namespace) -> Dict[str, object]:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "handler"}


def _run(args: argparse.Namespace, out_dir: Optional[Path], body: Callable[[RunManifest, Optional[Path]], None]) -> int:
    """Run one command body with manifest, error mapping and registry bookkeeping."""
    manifest = RunManifest(
        command=args.command,
        config_path=str(args.config) if getattr(args, "config", None) else None,
        arguments=_jsonable(args),
        version=_version(),
    )
    manifest_path = out_dir / "manifest.json" if out_dir is not None else None
    exit_code = 0
    try:
        body(manifest, manifest_path)
        manifest.status = "ok"
    except PegnnError as exc:
        exit_code = exc.exit_code
        manifest.status = "failed"
        manifest.error = {"type": type(exc).__name__, "detail": exc.detail, "context": {k: str(v) for k, v in exc.context.items()}}
        if isinstance(exc, DivergenceError):
            manifest.error["report"] = exc.report
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
    except Exception as exc:
        exit_code = 1
        manifest.status = "failed"
        manifest.error = {"type": type(exc).__name__, "detail": str(exc)}
        logger.exception("%s failed unexpectedly", args.command)
        print(f"error: {exc}", file=sys.stderr)
    manifest.exit_code = exit_code
    manifest.finished_at = utcnow()
    try:
        _write_manifest(manifest, manifest_path)
    except StorageError as exc:
        logger.error("could not write manifest: %s", exc)
        exit_code = exit_code or exc.exit_code

    log_run(
        command=args.command,
        status=manifest.status,
        exit_code=exit_code,
        manifest_path=str(manifest_path) if manifest_path is not None else None,
        started_at=manifest.started_at,
        finished_at=manifest.finished_at,
    )
    return exit_code


def _load(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else load_config()


# generate ---------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)

    def body(manifest: RunManifest, manifest_path: Optional[Path]) -> None:
        run = _load(args)
        sizes = split_sizes(run.sim)
        manifest.config = flatten_config(run)
        manifest.seeds = [run.sim.seed]
        manifest.outputs = [str(out_dir / f"{split}.bin") for split in sizes]
        _write_manifest(manifest, manifest_path)
        for split, n in sizes.items():
            samples = generate_dataset(run.sim, n, split=split, workers=args.workers)
            write_dataset(out_dir / f"{split}.bin", samples, run.sim, split)
            logger.info("wrote %d %s samples to %s", n, split, out_dir / f"{split}.bin")

    return _run(args, out_dir, body)


# train ------------------------------------------------------------------

def _resume_states(path: Optional[str], config: EgnnConfig, run: RunConfig) -> Dict[int, TrainState]:
    if not path:
        return {}
    p = Path(path)
    files = sorted(p.glob("state_*.ckpt")) if p.is_dir() else [p]
    if not files:
        raise StorageError("no train states to resume from", path=str(p))
    states = [TrainState.restore(f, config, run.train) for f in files]
    return {s.member: s for s in states}


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    data_dir = Path(args.data)

    def body(manifest: RunManifest, manifest_path: Optional[Path]) -> None:
        run = _load(args)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.mode is not None:
            overrides["mode"] = args.mode
        try:
            run.train = TrainConfig(**{**run.train.model_dump(), **overrides}).check()
        except ValueError as exc:
            raise ConfigError("invalid command-line override", reason=str(exc)) from exc
        config = network_config(run.model, run.train)
        n_members = run.train.ensemble_size if run.train.mode == "ensemble" else 1
        ckpt_dir, state_dir = out_dir / "checkpoints", out_dir / "state"
        manifest.config = flatten_config(run)
        manifest.seeds = [run.train.seed]
        manifest.inputs = [str(data_dir / "train.bin"), str(data_dir / "val.bin")]
        manifest.outputs = [str(ckpt_dir / f"member_{m:02d}.ckpt") for m in range(n_members)] + [str(out_dir / "train_log.csv")]
        _write_manifest(manifest, manifest_path)

        train_data, _ = read_dataset(data_dir / "train.bin")
        val_data, _ = read_dataset(data_dir / "val.bin")
        resume = _resume_states(args.resume, config, run)
        states = train(run.model, run.train, train_data, val_data, state_dir=state_dir, resume=resume, workers=args.workers)
        for state in states:
            meta = {
                "mode": run.train.mode,
                "member": state.member,
                "seed": state.seed,
                "best_epoch": state.best_epoch,
                "best_metric": state.best_metric,
            }
            write_checkpoint(ckpt_dir / f"member_{state.member:02d}.ckpt", config, {"params": state.best_params.values}, meta)
        write_log(out_dir / "train_log.csv", states)

    return _run(args, out_dir, body)


# evaluate ---------------------------------------------------------------

def _checkpoint_files(paths: Sequence[str]) -> List[Path]:
    files: List[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            found = sorted(p.glob("*.ckpt"))
            if not found:
                raise StorageError("no checkpoints in directory", path=str(p))
            files.extend(found)
        else:
            files.append(p)
    return files


def load_member(path: Path, expected: Optional[EgnnConfig] = None) -> NoisyPredictor:
    """Load one checkpoint, checking its parameter count against ``expected``.

    Whether the network has a noise input is taken from the checkpoint, so
    one config file checks deterministic, ensemble and noisy checkpoints alike.
    """
    config, vectors, _ = read_checkpoint(path)
    reference = config
    if expected is not None:
        reference = expected if config.is_stochastic else expected.model_copy(update={"noise_dim": 0})
    count = empty_params(reference).size
    if vectors["params"].size != count:
        raise CompatibilityError(
            "checkpoint does not match the model config",
            path=str(path),
            checkpoint_params=int(vectors["params"].size),
            config_params=count,
        )
    return NoisyPredictor(empty_params(config).with_values(vectors["params"]), config)


def cmd_evaluate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)

    def body(manifest: RunManifest, manifest_path: Optional[Path]) -> None:
        expected = None
        if args.config:
            run = load_config(args.config)
            expected = run.model
            manifest.config = flatten_config(run)
        files = _checkpoint_files(args.checkpoint)
        manifest.seeds = list(args.seeds)
        manifest.inputs = [str(f) for f in files] + [str(args.test)]
        manifest.outputs = [str(out_dir / "metrics.csv")]
        _write_manifest(manifest, manifest_path)

        members = [load_member(f, expected) for f in files]
        if len(members) > 1:
            predictor, k = EnsemblePredictor(members), len(members)
        elif args.point:
            predictor, k = PointPredictor(members[0].params, members[0].config), 1
        elif members[0].config.is_stochastic:
            predictor, k = members[0], args.K
        else:
            predictor, k = members[0], 1
        test_data, _ = read_dataset(args.test)
        reports = [evaluate(predictor, test_data, k, seed=seed) for seed in args.seeds]
        write_metrics_csv(out_dir / "metrics.csv", reports)
        print(format_report(reports))

    return _run(args, out_dir, body)


# params -----------------------------------------------------------------

def params_table(config: EgnnConfig, ensemble_size: int = 3) -> str:
    count = param_count(config)
    p = count.backbone
    rows = [
        ("EGNN", p),
        (f"EGNN ensemble (K={ensemble_size})", ensemble_size * p),
        ("P-EGNN", p + count.noise_overhead),
    ]
    lines = [f"{'model':<24}{'params':>12}{'ratio':>9}"]
    lines += [f"{name:<24}{n:>12,}{n / p:>8.2f}x" for name, n in rows]
    dz, dh, layers = config.noise_dim, config.hidden_width, config.n_layers
    lines.append(
        f"backbone P = {p:,}; noise overhead dP = {count.noise_overhead:,} "
        f"(d_z^2 = {dz * dz:,} + 2 L d_h d_z = {2 * layers * dh * dz:,})"
    )
    return "\n".join(lines)


def cmd_params(args: argparse.Namespace) -> int:
    def body(manifest: RunManifest, manifest_path: Optional[Path]) -> None:
        run = _load(args)
        manifest.config = flatten_config(run)
        print(params_table(run.model, args.ensemble_size))

    return _run(args, None, body)


# sweep ------------------------------------------------------------------

def _sweep_member(job) -> Optional[Dict[str, object]]:
    run, n, model, seed, data, test_data, k = job
    try:
        train_config = run.train.model_copy(update={"mode": model, "seed": seed}).check()
        config = network_config(run.model, train_config)
        states = train(run.model, train_config, data["train"], data["val"])
        members = [NoisyPredictor(s.best_params, config) for s in states]
        if model == "ensemble":
            predictor, k_eval = EnsemblePredictor(members), len(members)
        else:
            predictor, k_eval = members[0], (k if config.is_stochastic else 1)
        report = evaluate(predictor, test_data, k_eval, seed=seed)
    except Exception:
        logger.exception("sweep member n=%d model=%s seed=%d failed", n, model, seed)
        return None
    return {"n": n, "model": model, "seed": seed, "mse": report.mse_of_mean, "crps": report.crps, "ssr": report.ssr}


def cmd_sweep(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)

    def body(manifest: RunManifest, manifest_path: Optional[Path]) -> None:
        run = _load(args)
        manifest.config = flatten_config(run)
        manifest.seeds = list(args.seeds)
        manifest.outputs = [str(out_dir / "sweep.csv")]
        _write_manifest(manifest, manifest_path)

        test_data = generate_dataset(run.sim, run.sim.n_test, split="test", workers=args.jobs)
        jobs = []
        for n in args.sizes:
            sim = run.sim.model_copy(update={"n_train": n})
            data = {
                "train": generate_dataset(sim, n, split="train", workers=args.jobs),
                "val": generate_dataset(sim, sim.n_val, split="val", workers=args.jobs),
            }
            jobs += [(run, n, model, seed, data, test_data, args.K) for seed in args.seeds for model in SWEEP_MODELS]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                rows = list(pool.map(_sweep_member, jobs))
        else:
            rows = [_sweep_member(job) for job in jobs]

        path = out_dir / "sweep.csv"
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(SWEEP_COLUMNS)
                for row in rows:
                    if row is not None:
                        writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in SWEEP_COLUMNS])
        except OSError as exc:
            raise StorageError(f"cannot write {path}", path=str(path)) from exc
        failed = sum(row is None for row in rows)
        if failed:
            logger.warning("%d of %d sweep members failed", failed, len(rows))

    return _run(args, out_dir, body)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pegnn", description="Perturbed EGNN training and evaluation on the charged N-body benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate the train/val/test datasets")
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--out", required=True, help="output directory for <split>.bin")
    p.add_argument("--workers", type=int, default=1, help="simulation processes")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="train a deterministic, ensemble or crps model")
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--data", required=True, help="directory holding train.bin and val.bin")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides TRAIN_SEED")
    p.add_argument("--mode", choices=SWEEP_MODELS, default=None, help="overrides TRAIN_MODE")
    p.add_argument("--resume", default=None, help="train state file or state directory to continue from")
    p.add_argument("--workers", type=int, default=1, help="processes for ensemble members")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints on a test set")
    p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or an ensemble directory")
    p.add_argument("--test", required=True, help="test dataset file")
    p.add_argument("--out", required=True, help="output directory for metrics.csv")
    p.add_argument("--config", default=None, help="config the checkpoints must match")
    p.add_argument("--K", type=int, default=100, help="samples per structure for a noisy model")
    p.add_argument("--seeds", type=int, nargs="+", default=[0], help="noise seeds, one report each")
    p.add_argument("--point", action="store_true", help="single z = 0 pass instead of K draws")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("params", help="print the parameter accounting table")
    p.add_argument("--config", default=None, help="flat key-value config file")
    p.add_argument("--ensemble-size", type=int, default=3)
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("sweep", help="train and evaluate every model over training sizes and seeds")
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--out", required=True, help="output directory for sweep.csv")
    p.add_argument("--sizes", type=int, nargs="+", default=[1000, 3000, 10000])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--K", type=int, default=100, help="evaluation samples per structure")
    p.add_argument("--jobs", type=int, default=1, help="concurrent member runs")
    p.set_defaults(handler=cmd_sweep)
    return parser


def configure_logging() -> None:
    # Do not override global config if already set by the caller
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=os.getenv("LOG_LEVEL", "INFO").upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
