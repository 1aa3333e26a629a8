"""Test-time metrics of an ensemble forecaster.

For every test structure the forecaster produces K position samples. The
report holds the MSE of the ensemble mean, the fair CRPS, the spread-to-skill
ratio with the sqrt((K+1)/K) finite-ensemble correction, and the Spearman
rank correlation between per-structure squared error and predicted variance.

Copyright (c) Bryn Gwalad 2025
"""

import csv
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
from scipy.stats import pearsonr, rankdata

from .egnn_core import EgnnParams, predict_ensemble, predict_point
from .errors import StorageError
from .models import EgnnConfig, MetricsReport, MetricsSummary
from .nbody_sim import GraphSample, ParticleState
from .noise_injection import batch_eps
from .scoring import EnsemblePrediction, crps_multi

logger = logging.getLogger("pegnn.metrics")

EVAL_NOISE_STREAM = 4
# Structures predicted per call before falling back to one at a time.
EVAL_CHUNK = 64

REPORT_COLUMNS = ("seed", "n_test", "n_failed", "k_eval", "mse_of_mean", "crps", "ssr", "spearman_rho")


class Predictor(Protocol):
    """Anything that turns input states into K position samples each."""

    def sample(self, states: Sequence[ParticleState], k: int, seed: int, start: int) -> np.ndarray:
        """Return (len(states), K', N, 3); ``start`` is the index of ``states[0]`` in the test set."""


class NoisyPredictor:
    """A single network; K samples from K noise draws (identical if deterministic)."""

    def __init__(self, params: EgnnParams, config: EgnnConfig) -> None:
        self.params = params
        self.config = config

    def sample(self, states, k, seed, start):
        eps = None
        if self.config.is_stochastic:
            eps = batch_eps(self.config.noise_dim, len(states), k, (seed, EVAL_NOISE_STREAM), start=start)
        return predict_ensemble(self.params, self.config, states, eps, k)


class PointPredictor:
    """One pass with z = 0; a K = 1 ensemble."""

    def __init__(self, params: EgnnParams, config: EgnnConfig) -> None:
        self.params = params
        self.config = config

    def sample(self, states, k, seed, start):
        return np.stack([predict_point(self.params, self.config, s) for s in states])[:, None]


class EnsemblePredictor:
    """Deep ensemble; each member contributes one sample and K is the member count."""

    def __init__(self, members: Sequence[NoisyPredictor]) -> None:
        if not members:
            raise ValueError("an ensemble needs at least one member")
        self.members = list(members)

    def sample(self, states, k, seed, start):
        return np.concatenate([m.sample(states, 1, seed, start) for m in self.members], axis=1)


def mse_of_mean(pred: EnsemblePrediction, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return float(np.mean((pred.mean() - y) ** 2))


def ssr(predictions: np.ndarray, targets: np.ndarray, k: Optional[int] = None, corrected: bool = True) -> Optional[float]:
    """Spread-to-skill ratio over all structures and entries.

    ``predictions`` is (S, K, D) and ``targets`` (S, D). The spread is the
    root of the mean unbiased ensemble variance, times sqrt((K+1)/K) when
    ``corrected``; the skill is the RMSE of the ensemble mean. Returns None
    for K < 2 or a zero RMSE.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    k = predictions.shape[1] if k is None else k
    if k < 2:
        return None
    rmse = float(np.sqrt(np.mean((predictions.mean(axis=1) - targets) ** 2)))
    if rmse == 0.0:
        return None
    variance = float(np.mean(predictions.var(axis=1, ddof=1)))
    factor = (k + 1) / k if corrected else 1.0
    return float(np.sqrt(factor * variance) / rmse)


def spearman_rho(errors: Sequence[float], variances: Sequence[float]) -> Optional[float]:
    """Rank correlation with midranks for ties; None when either side is fully tied."""
    errors = np.asarray(errors, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if errors.shape != variances.shape:
        raise ValueError("errors and variances differ in length")
    if errors.size < 3:
        raise ValueError("Spearman's rho needs at least 3 structures")
    if np.all(errors == errors[0]) or np.all(variances == variances[0]):
        return None
    rho = float(pearsonr(rankdata(errors), rankdata(variances))[0])
    return rho if np.isfinite(rho) else None


def _predict(predictor: Predictor, states: List[ParticleState], k: int, seed: int, start: int) -> List[Optional[np.ndarray]]:
    """Samples per structure; a structure that fails is None and does not abort the run."""
    try:
        out = predictor.sample(states, k, seed, start)
        if np.all(np.isfinite(out)):
            return list(out)
    except Exception:
        if len(states) == 1:
            logger.exception("prediction failed for test structure %d", start)
            return [None]
    if len(states) == 1:
        logger.warning("non-finite prediction for test structure %d", start)
        return [None]
    return [r for i, s in enumerate(states) for r in _predict(predictor, [s], k, seed, start + i)]


def evaluate(predictor: Predictor, data: Sequence[GraphSample], k: int, seed: int = 0) -> MetricsReport:
    """Score ``predictor`` on ``data`` with K samples per structure.

    The effective K is what the predictor returns (the member count for a
    deep ensemble, 1 for point predictions).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    samples: List[Optional[np.ndarray]] = []
    for start in range(0, len(data), EVAL_CHUNK):
        states = [s.input for s in data[start:start + EVAL_CHUNK]]
        samples.extend(_predict(predictor, states, k, seed, start))

    kept = [i for i, s in enumerate(samples) if s is not None]
    n_failed = len(data) - len(kept)
    if not kept:
        raise ValueError("every test structure failed")
    preds = np.stack([samples[i].reshape(samples[i].shape[0], -1) for i in kept])
    targets = np.stack([data[i].target_positions.reshape(-1) for i in kept])
    k_eval = preds.shape[1]

    ensembles = [EnsemblePrediction(p) for p in preds]
    errors = np.array([mse_of_mean(e, y) for e, y in zip(ensembles, targets)])
    crps = float(np.mean([crps_multi(e, y).value for e, y in zip(ensembles, targets)]))
    rho = None
    if k_eval >= 2 and len(kept) >= 3:
        rho = spearman_rho(errors, [float(e.variance().mean()) for e in ensembles])
    report = MetricsReport(
        seed=seed,
        n_test=len(kept),
        n_failed=n_failed,
        k_eval=k_eval,
        mse_of_mean=float(errors.mean()),
        crps=crps,
        ssr=ssr(preds, targets, k_eval),
        spearman_rho=rho,
    )
    logger.info(
        "evaluated %d structures (K=%d, %d failed): mse=%.6g crps=%.6g ssr=%s rho=%s",
        report.n_test, k_eval, n_failed, report.mse_of_mean, report.crps, report.ssr, report.spearman_rho,
    )
    return report


def _mean_std(values: List[Optional[float]]):
    if not values or any(v is None for v in values):
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsSummary:
    """Mean and sample standard deviation of each metric across seeds."""
    if not reports:
        raise ValueError("no reports to aggregate")
    fields = {}
    for name in ("mse_of_mean", "crps", "ssr", "spearman_rho"):
        fields[f"{name}_mean"], fields[f"{name}_std"] = _mean_std([getattr(r, name) for r in reports])
    return MetricsSummary(n_seeds=len(reports), **fields)


# Desk-scale targets for P-EGNN against the two baselines.
CRPS_GAIN_OVER_MAE = 0.10
MSE_TOLERANCE = 0.25


def trend_checks(deterministic: MetricsSummary, ensemble: MetricsSummary, noisy: MetricsSummary) -> Dict[str, bool]:
    """Compare seed-averaged results of the three model families.

    The deterministic model is scored with K = 1, so its CRPS is its MAE. A
    check with an undefined metric fails.
    """

    def ok(*values: Optional[float]) -> bool:
        return all(v is not None and np.isfinite(v) for v in values)

    det_mae, crps = deterministic.crps_mean, noisy.crps_mean
    det_mse, mse = deterministic.mse_of_mean_mean, noisy.mse_of_mean_mean
    ens_ssr, ssr_value = ensemble.ssr_mean, noisy.ssr_mean
    return {
        "crps_below_deterministic_mae": ok(det_mae, crps) and crps <= (1.0 - CRPS_GAIN_OVER_MAE) * det_mae,
        "ssr_above_deep_ensemble": ok(ens_ssr, ssr_value) and ssr_value > ens_ssr,
        "mse_near_deterministic": ok(det_mse, mse) and mse <= (1.0 + MSE_TOLERANCE) * det_mse,
    }


def report_columns(reports: Sequence[MetricsReport]) -> List[str]:
    """Stable column order; ssr and spearman_rho are dropped when no report defines them."""
    return [
        c for c in REPORT_COLUMNS
        if c not in ("ssr", "spearman_rho") or any(getattr(r, c) is not None for r in reports)
    ]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path: os.PathLike, reports: Sequence[MetricsReport]) -> MetricsSummary:
    """One row per seed, then ``mean`` and ``std`` rows."""
    summary = aggregate_reports(reports)
    columns = report_columns(reports)
    rows = [[_cell(getattr(r, c)) for c in columns] for r in reports]
    for stat in ("mean", "std"):
        row = []
        for c in columns:
            if c == "seed":
                row.append(stat)
            elif c in ("n_test", "n_failed", "k_eval"):
                row.append(_cell(getattr(reports[0], c)) if len({getattr(r, c) for r in reports}) == 1 else "")
            else:
                row.append(_cell(getattr(summary, f"{c}_{stat}")))
        rows.append(row)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            writer.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}", path=str(path)) from exc
    return summary


def format_report(reports: Sequence[MetricsReport]) -> str:
    """Pretty-printed table of the per-seed reports and their aggregate."""
    summary = aggregate_reports(reports)
    columns = report_columns(reports)
    metric_cols = [c for c in columns if c not in ("seed", "n_test", "n_failed", "k_eval")]
    lines = [f"K={reports[0].k_eval}  n_test={reports[0].n_test}  seeds={len(reports)}"]
    lines.append("seed    " + "".join(f"{c:>16}" for c in metric_cols))
    for r in reports:
        lines.append(f"{r.seed:<8}" + "".join(f"{getattr(r, c):>16.6g}" if getattr(r, c) is not None else f"{'-':>16}" for c in metric_cols))
    agg = []
    for c in metric_cols:
        mean, std = getattr(summary, f"{c}_mean"), getattr(summary, f"{c}_std")
        agg.append(f"{mean:.4g}+/-{std:.2g}".rjust(16) if mean is not None else f"{'-':>16}")
    lines.append("all".ljust(8) + "".join(agg))
    return "\n".join(lines)
