"""Data models for pegnn.

This module defines the SQLModel models shared across the package: the three
configuration sections (simulation, network, training), the evaluation
reports, the run manifest and the ``RunRecord`` registry table.

Copyright (c) Bryn Gwalad 2025
"""

from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from sqlmodel import Field, SQLModel

from .errors import ConfigError

TRAIN_MODES = ("deterministic", "ensemble", "crps")
NOISE_GENERATOR_INITS = ("zero", "fan_in", "identity")


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


class SimConfig(SQLModel):
    """Charged-particle N-body simulation settings.

    Attributes:
        n_particles: particles per system (>= 2)
        charge_values: allowed charges, drawn uniformly
        dt: integrator time step
        n_steps: horizon T; targets are the positions after T steps
        softening: length added inside the Coulomb denominator
        box_init_scale: std of the initial positions per coordinate
        vel_init_scale: std of the initial velocities per coordinate
        min_pair_distance: initial states closer than this are resampled
        n_train: training set size; validation is max(n_train // 10, 100)
        n_test: test set size
        seed: root seed of every per-sample substream
    """

    n_particles: int = Field(default=5, ge=2)
    charge_values: List[float] = Field(default_factory=lambda: [-1.0, 1.0])
    dt: float = Field(default=1e-3, gt=0)
    n_steps: int = Field(default=1000, ge=1)
    softening: float = Field(default=1e-2, ge=0)
    box_init_scale: float = Field(default=1.0, gt=0)
    vel_init_scale: float = Field(default=1.0, ge=0)
    min_pair_distance: float = Field(default=0.1, ge=0)
    n_train: int = Field(default=1000, ge=1)
    n_test: int = Field(default=2000, ge=1)
    seed: int = Field(default=0, ge=0)

    def check(self) -> "SimConfig":
        if not self.charge_values:
            raise ConfigError("charge_values must not be empty")
        return self

    @property
    def n_val(self) -> int:
        return max(self.n_train // 10, 100)


class EgnnConfig(SQLModel):
    """Backbone and noise widths.

    ``noise_dim = 0`` is the deterministic backbone. ``noise_generator_init``
    chooses the initial W_z; the per-block noise projections always start at
    zero.
    """

    n_layers: int = Field(default=4, ge=1)
    hidden_width: int = Field(default=64, ge=1)
    noise_dim: int = Field(default=32, ge=0)
    activation: str = "silu"
    noise_generator_init: str = "fan_in"

    def check(self) -> "EgnnConfig":
        if self.activation != "silu":
            raise ConfigError("unsupported activation", activation=self.activation)
        if self.noise_generator_init not in NOISE_GENERATOR_INITS:
            raise ConfigError(
                "unknown noise generator init",
                noise_generator_init=self.noise_generator_init,
                allowed=NOISE_GENERATOR_INITS,
            )
        return self

    @property
    def is_stochastic(self) -> bool:
        return self.noise_dim > 0


class TrainConfig(SQLModel):
    """Optimisation settings for the three model families."""

    mode: str = "crps"
    k_train: int = Field(default=10, ge=1)
    k_val: int = Field(default=50, ge=1)
    batch_size: int = Field(default=100, ge=1)
    epochs: int = Field(default=1000, ge=0)
    learning_rate: float = Field(default=5e-4, gt=0)
    lr_min: float = Field(default=1e-5, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    ensemble_size: int = Field(default=3, ge=1)
    grad_clip_norm: Optional[float] = Field(default=5.0, gt=0)
    seed: int = Field(default=0, ge=0)
    patience: int = Field(default=50, ge=1)
    divergence_factor: float = Field(default=10.0, gt=1)
    record_wall_time: bool = False

    def check(self) -> "TrainConfig":
        if self.mode not in TRAIN_MODES:
            raise ConfigError("unknown training mode", mode=self.mode, allowed=TRAIN_MODES)
        if self.mode == "crps" and self.k_train < 2:
            raise ConfigError("crps mode requires K_train >= 2", k_train=self.k_train)
        if self.mode == "ensemble" and self.ensemble_size < 2:
            raise ConfigError("ensemble mode requires ensemble_size >= 2", ensemble_size=self.ensemble_size)
        return self


class RunConfig(SQLModel):
    """All sections of one config file."""

    schema_version: int = 1
    sim: SimConfig = Field(default_factory=SimConfig)
    model: EgnnConfig = Field(default_factory=EgnnConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


class MetricsReport(SQLModel):
    """Test-time metrics of one evaluation run (one seed).

    ``ssr`` and ``spearman_rho`` are None when undefined: K_eval < 2, zero
    ensemble-mean error, or fully tied ranks.
    """

    seed: int = 0
    n_test: int = 0
    n_failed: int = 0
    k_eval: int = 1
    mse_of_mean: float
    crps: float
    ssr: Optional[float] = None
    spearman_rho: Optional[float] = None


class MetricsSummary(SQLModel):
    """Mean and standard deviation of each metric across seeds."""

    n_seeds: int
    mse_of_mean_mean: float
    mse_of_mean_std: float
    crps_mean: float
    crps_std: float
    ssr_mean: Optional[float] = None
    ssr_std: Optional[float] = None
    spearman_rho_mean: Optional[float] = None
    spearman_rho_std: Optional[float] = None


class RunManifest(SQLModel):
    """What a CLI command was asked to do, written before it starts working."""

    command: str
    config_path: Optional[str] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    arguments: Dict[str, Any] = Field(default_factory=dict)
    seeds: List[int] = Field(default_factory=list)
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    version: str = ""
    started_at: datetime = Field(default_factory=utcnow)
    finished_at: Optional[datetime] = None
    status: str = "running"
    exit_code: Optional[int] = None
    error: Optional[Dict[str, Any]] = None


class RunRecord(SQLModel, table=True):
    """Registry row appended for every CLI invocation."""

    id: Optional[int] = Field(default=None, primary_key=True)
    command: str
    status: str
    exit_code: Optional[int] = None
    manifest_path: Optional[str] = None
    started_at: datetime = Field(default_factory=utcnow)
    finished_at: Optional[datetime] = None
