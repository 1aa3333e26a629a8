"""Fair CRPS, the l1 energy score and a Gaussian CRPS oracle.

For K samples of a scalar and an observation y the fair CRPS is::

    reliability = 1/K * sum_k |x_k - y|
    spread      = 1/(2K(K-1)) * sum_{i != j} |x_i - x_j|      (0 when K = 1)
    value       = reliability - spread

The i != j sum counts every unordered pair twice. Multivariate predictions
are scored entry by entry and averaged with a 1/D prefactor, which equals
1/D times the fair l1 energy score.

Copyright (c) Bryn Gwalad 2025
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.stats import norm

from . import grad_core as gc


class ScoreValue(NamedTuple):
    value: float
    reliability_term: float
    spread_term: float


@dataclass(frozen=True)
class EnsemblePrediction:
    """K samples of a D-entry output.

    ``layout`` maps the flat entries back to a shape such as (N, 3); it is
    None for scalar outputs.
    """

    samples: np.ndarray
    layout: Optional[Tuple[int, ...]] = None

    @classmethod
    def from_positions(cls, positions: np.ndarray) -> "EnsemblePrediction":
        """Wrap a (K, N, 3) stack of predicted positions."""
        positions = np.asarray(positions, dtype=np.float64)
        return cls(positions.reshape(positions.shape[0], -1), layout=positions.shape[1:])

    @property
    def k(self) -> int:
        return int(self.samples.shape[0])

    @property
    def d(self) -> int:
        return int(self.samples.shape[1])

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def variance(self) -> np.ndarray:
        """Unbiased per-entry variance; zero for K = 1."""
        if self.k < 2:
            return np.zeros(self.d)
        return self.samples.var(axis=0, ddof=1)


Samples = Union[EnsemblePrediction, np.ndarray]


def _as_matrix(pred: Samples) -> np.ndarray:
    samples = pred.samples if isinstance(pred, EnsemblePrediction) else pred
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError(f"expected a (K, D) sample matrix, got shape {samples.shape}")
    return samples


def spread_sorted(samples: np.ndarray) -> np.ndarray:
    """Per-column fair spread term in O(K log K) via order statistics.

    sum_{i != j} |x_i - x_j| = 2 * sum_k (2k - K + 1) x_(k) with x_(k) the
    k-th smallest value (0-based).
    """
    samples = _as_matrix(samples)
    k = samples.shape[0]
    if k < 2:
        return np.zeros(samples.shape[1])
    weights = 2.0 * np.arange(k) - k + 1.0
    ordered = np.sort(samples, axis=0)
    return (weights @ ordered) / (k * (k - 1))


def spread_direct(samples: np.ndarray) -> np.ndarray:
    """O(K^2) pairwise form of ``spread_sorted``."""
    samples = _as_matrix(samples)
    k = samples.shape[0]
    if k < 2:
        return np.zeros(samples.shape[1])
    pairwise = np.abs(samples[:, None, :] - samples[None, :, :]).sum(axis=(0, 1))
    return pairwise / (2.0 * k * (k - 1))


def fair_crps_scalar(samples: np.ndarray, y: float) -> ScoreValue:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size < 1:
        raise ValueError("need at least one sample")
    reliability = float(np.mean(np.abs(samples - y)))
    spread = float(spread_sorted(samples[:, None])[0])
    return ScoreValue(reliability - spread, reliability, spread)


def crps_entries(pred: Samples, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-entry (reliability, spread) arrays of length D."""
    samples = _as_matrix(pred)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (samples.shape[1],):
        raise ValueError(f"target has {y.size} entries, samples have {samples.shape[1]}")
    return np.abs(samples - y).mean(axis=0), spread_sorted(samples)


def crps_multi(pred: Samples, y: np.ndarray) -> ScoreValue:
    """Fair CRPS averaged over the D entries."""
    reliability, spread = crps_entries(pred, y)
    rel, spr = float(reliability.mean()), float(spread.mean())
    return ScoreValue(rel - spr, rel, spr)


def energy_score_l1(pred: Samples, y: np.ndarray) -> float:
    """Fair energy score with the l1 norm, computed from whole sample vectors."""
    samples = _as_matrix(pred)
    k = samples.shape[0]
    if k < 2:
        raise ValueError("the fair energy score needs K >= 2")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    skill = np.abs(samples - y).sum(axis=1).mean()
    pair = np.abs(samples[:, None, :] - samples[None, :, :]).sum(axis=2)
    return float(skill - pair.sum() / (2.0 * k * (k - 1)))


def crps_joint(
    energy_pred: Samples,
    force_pred: Samples,
    energy_true: float,
    forces_true: np.ndarray,
    n_atoms: int,
) -> float:
    """CRPS of the per-atom energy plus CRPS of the forces."""
    if n_atoms <= 0:
        raise ValueError("n_atoms must be positive")
    energies, forces = _as_matrix(energy_pred), _as_matrix(force_pred)
    if energies.shape[0] != forces.shape[0]:
        raise ValueError("energy and force ensembles differ in K")
    per_atom = crps_multi(energies / n_atoms, np.atleast_1d(energy_true) / n_atoms)
    return per_atom.value + crps_multi(forces, forces_true).value


def gaussian_crps_analytic(mu: float, sigma: float, y: float) -> float:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return abs(y - mu)
    w = (y - mu) / sigma
    return float(sigma * (w * (2.0 * norm.cdf(w) - 1.0) + 2.0 * norm.pdf(w) - 1.0 / np.sqrt(np.pi)))


def pair_indices(n_structures: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of every ordered pair (i, j), i != j, within each block of K rows."""
    i, j = np.nonzero(~np.eye(k, dtype=bool))
    offsets = (np.arange(n_structures) * k)[:, None]
    return (offsets + i).reshape(-1), (offsets + j).reshape(-1)


def crps_multi_tape(samples, targets: np.ndarray, k: int):
    """Batch-mean fair CRPS recorded on a tape.

    ``samples`` has S*K rows (structure-major) and D columns, ``targets`` is
    (S, D). Returns the (loss, reliability, spread) handles; the spread uses
    the pairwise form so every |.| has the 0-at-0 subgradient.
    """
    values = samples.value if isinstance(samples, gc.Var) else np.asarray(samples)
    rows, d = values.shape
    s = rows // k
    if s * k != rows or targets.shape != (s, d):
        raise ValueError(f"samples {values.shape} do not match targets {targets.shape} with K={k}")
    owner = np.repeat(np.arange(s), k)
    reliability = gc.mul(gc.sum_(gc.absolute(gc.sub(samples, targets[owner]))), 1.0 / (s * k * d))
    if k < 2:
        return reliability, reliability, np.zeros(())
    a, b = pair_indices(s, k)
    pair_abs = gc.absolute(gc.sub(gc.gather(samples, a), gc.gather(samples, b)))
    spread = gc.mul(gc.sum_(pair_abs), 1.0 / (2.0 * k * (k - 1) * s * d))
    return gc.sub(reliability, spread), reliability, spread
