"""Charged-particle N-body simulator and dataset generator.

Particles have unit mass and interact through a softened Coulomb force. The
integrator is kick-drift-kick velocity Verlet. A supervised sample pairs the
initial state with the positions after ``n_steps`` steps.

Every sample is drawn from its own RNG substream keyed by (seed, split,
index), so a dataset of n samples is a prefix of any larger dataset with the
same config and split, and samples can be generated in any order or in
parallel.

Copyright (c) Bryn Gwalad 2025
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import DegenerateConfigurationError, RejectionRateError
from .models import SimConfig

logger = logging.getLogger("pegnn.nbody_sim")

SPLITS = {"train": 0, "val": 1, "test": 2}

# Rejection sampling gives up after this many draws per accepted sample.
MAX_INIT_ATTEMPTS = 1000
# Targets farther than this multiple of box_init_scale are flagged.
TARGET_RADIUS_FACTOR = 10.0


@dataclass(frozen=True)
class ParticleState:
    """Positions (N, 3), velocities (N, 3) and charges (N,) of one system."""

    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray

    @property
    def n_particles(self) -> int:
        return int(self.positions.shape[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities)))


@dataclass(frozen=True)
class Trajectory:
    """``n_steps + 1`` states, the first being the initial state."""

    states: List[ParticleState]
    config: SimConfig


@dataclass(frozen=True)
class GraphSample:
    """Supervised pair: state at t=0 and positions at t=T, same particle order."""

    input: ParticleState
    target_positions: np.ndarray


@dataclass
class GenerationStats:
    accepted: int = 0
    rejected: int = 0
    flagged: List[int] = field(default_factory=list)

    @property
    def rejection_rate(self) -> float:
        total = self.accepted + self.rejected
        return self.rejected / total if total else 0.0


def coulomb_forces(positions: np.ndarray, charges: np.ndarray, softening: float) -> np.ndarray:
    """Pairwise-summed softened Coulomb forces.

    The force on i is sum_j q_i q_j (r_i - r_j) / (|r_i - r_j|^2 + eps^2)^{3/2}.
    Pair terms are exactly antisymmetric, so the forces sum to zero up to
    summation round-off.
    """
    diff = positions[:, None, :] - positions[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff) + softening * softening
    np.fill_diagonal(r2, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_r3 = r2 ** -1.5
    np.fill_diagonal(inv_r3, 0.0)
    qq = charges[:, None] * charges[None, :]
    with np.errstate(invalid="ignore"):
        forces = np.einsum("ij,ijk->ik", qq * inv_r3, diff)
    if not np.all(np.isfinite(forces)):
        raise DegenerateConfigurationError(
            "non-finite Coulomb force", pair=_closest_pair(positions)
        )
    return forces


def _closest_pair(positions: np.ndarray) -> Tuple[int, int]:
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    dist[~np.isfinite(dist)] = -1.0
    dist[np.arange(n), np.arange(n)] = np.inf
    i, j = np.unravel_index(np.argmin(dist), dist.shape)
    return int(min(i, j)), int(max(i, j))


def potential_energy(positions: np.ndarray, charges: np.ndarray, softening: float) -> float:
    """Softened Coulomb potential consistent with ``coulomb_forces``."""
    iu = np.triu_indices(positions.shape[0], k=1)
    diff = positions[iu[0]] - positions[iu[1]]
    r = np.sqrt(np.einsum("ij,ij->i", diff, diff) + softening * softening)
    return float(np.sum(charges[iu[0]] * charges[iu[1]] / r))


def total_energy(state: ParticleState, softening: float) -> float:
    kinetic = 0.5 * float(np.sum(state.velocities * state.velocities))
    return kinetic + potential_energy(state.positions, state.charges, softening)


def step_leapfrog(state: ParticleState, dt: float, softening: float) -> ParticleState:
    """One kick-drift-kick step with unit masses; charges unchanged."""
    new_state, _ = _kdk(state, dt, softening, coulomb_forces(state.positions, state.charges, softening))
    return new_state


def _kdk(state: ParticleState, dt: float, softening: float, forces: np.ndarray) -> Tuple[ParticleState, np.ndarray]:
    half = state.velocities + 0.5 * dt * forces
    positions = state.positions + dt * half
    new_forces = coulomb_forces(positions, state.charges, softening)
    velocities = half + 0.5 * dt * new_forces
    return ParticleState(positions, velocities, state.charges), new_forces


def simulate(initial: ParticleState, config: SimConfig, record: bool = True) -> Trajectory:
    """Integrate ``config.n_steps`` steps.

    With ``record=False`` only the initial and final states are kept.
    """
    state = initial
    forces = coulomb_forces(state.positions, state.charges, config.softening)
    states = [state]
    for _ in range(config.n_steps):
        state, forces = _kdk(state, config.dt, config.softening, forces)
        if record:
            states.append(state)
    if not record:
        states.append(state)
    return Trajectory(states=states, config=config)


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Counter-based generator of one sample's substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, SPLITS[split], index])))


def _min_pair_distance(positions: np.ndarray) -> float:
    iu = np.triu_indices(positions.shape[0], k=1)
    diff = positions[iu[0]] - positions[iu[1]]
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", diff, diff))))


def sample_initial_state(config: SimConfig, rng: np.random.Generator) -> Tuple[ParticleState, int]:
    """Draw an initial state, resampling positions that are too close.

    Returns the state and the number of rejected draws.
    """
    n = config.n_particles
    charges = rng.choice(np.asarray(config.charge_values, dtype=np.float64), size=n)
    velocities = rng.normal(0.0, config.vel_init_scale, size=(n, 3))
    for rejected in range(MAX_INIT_ATTEMPTS):
        positions = rng.normal(0.0, config.box_init_scale, size=(n, 3))
        if _min_pair_distance(positions) >= config.min_pair_distance:
            return ParticleState(positions, velocities, charges), rejected
    raise RejectionRateError(
        "could not draw an initial state above the minimum pair distance",
        attempts=MAX_INIT_ATTEMPTS,
        min_pair_distance=config.min_pair_distance,
    )


def generate_sample(config: SimConfig, index: int, split: str = "train") -> Tuple[GraphSample, int]:
    rng = sample_rng(config.seed, split, index)
    initial, rejected = sample_initial_state(config, rng)
    trajectory = simulate(initial, config, record=False)
    return GraphSample(input=initial, target_positions=trajectory.states[-1].positions), rejected


def _generate_one(args: Tuple[SimConfig, int, str]) -> Tuple[GraphSample, int]:
    return generate_sample(*args)


def generate_dataset(
    config: SimConfig,
    n_samples: int,
    split: str = "train",
    workers: int = 1,
    stats: Optional[GenerationStats] = None,
) -> List[GraphSample]:
    """Simulate ``n_samples`` independent systems of one split.

    Deterministic in (config, split, n_samples); sample i depends only on
    (seed, split, i). Raises RejectionRateError when more than half of the
    initial draws were rejected.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    stats = stats if stats is not None else GenerationStats()
    jobs = [(config, i, split) for i in range(n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, jobs, chunksize=max(1, n_samples // (4 * workers))))
    else:
        results = [_generate_one(job) for job in jobs]

    samples = []
    limit = TARGET_RADIUS_FACTOR * config.box_init_scale
    for i, (sample, rejected) in enumerate(results):
        stats.accepted += 1
        stats.rejected += rejected
        radius = np.linalg.norm(sample.target_positions, axis=1)
        if not np.all(np.isfinite(radius)) or np.any(radius > limit):
            stats.flagged.append(i)
        samples.append(sample)

    logger.info(
        "generated %d %s samples: rejected=%d rate=%.3f flagged=%d",
        n_samples, split, stats.rejected, stats.rejection_rate, len(stats.flagged),
    )
    if stats.flagged:
        logger.warning("%d %s targets outside %.1f x box scale: %s", len(stats.flagged), split, TARGET_RADIUS_FACTOR, stats.flagged[:10])
    if stats.rejection_rate > 0.5:
        raise RejectionRateError(
            "initial-state rejection rate above 50%",
            split=split,
            rejected=stats.rejected,
            accepted=stats.accepted,
        )
    return samples


def split_sizes(config: SimConfig) -> dict:
    return {"train": config.n_train, "val": config.n_val, "test": config.n_test}
