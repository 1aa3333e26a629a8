"""Training loops for the deterministic EGNN, the deep ensemble and P-EGNN.

* ``deterministic``: one network without noise input, MSE loss.
* ``ensemble``: ``ensemble_size`` such networks with derived seeds.
* ``crps``: one noisy network, fair CRPS over K_train draws per structure.

Every random choice (init, shuffle order, noise draws) comes from a stream
keyed by integers, so a run is a pure function of its config, seed and data.
Resuming from a saved TrainState at an epoch boundary continues the exact
same sequence of updates.

Copyright (c) Bryn Gwalad 2025
"""

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import grad_core as gc
from .egnn_core import EgnnParams, egnn_graph, init_params, make_batch, noise_from_eps, param_shapes, predict_ensemble
from .errors import CompatibilityError, DivergenceError, NonFiniteLossError, StorageError
from .grad_core import ParamVector
from .models import EgnnConfig, TrainConfig
from .nbody_sim import GraphSample
from .noise_injection import batch_eps, noise_rng
from .scoring import crps_multi_tape, spread_sorted
from .storage import read_checkpoint, write_checkpoint

logger = logging.getLogger("pegnn.training")

LOG_COLUMNS = ("member", "epoch", "train_loss", "val_metric", "wall_time_s", "grad_norm", "passes")

# Stream tags mixed into RNG keys.
SHUFFLE_STREAM = 1
TRAIN_NOISE_STREAM = 2
VAL_NOISE_STREAM = 3


class Adam:
    """Adaptive moment estimation on a flat parameter vector, updated in place."""

    def __init__(
        self,
        size: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        if self.weight_decay:
            grad = grad + self.weight_decay * values
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        values -= (lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.eps)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine decay from ``learning_rate`` at epoch 0 to ``lr_min`` at the last epoch."""
    if config.epochs <= 1:
        return config.learning_rate
    progress = min(epoch / (config.epochs - 1), 1.0)
    return config.lr_min + 0.5 * (config.learning_rate - config.lr_min) * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grad: np.ndarray, max_norm: Optional[float]) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def derive_seed(seed: int, member: int) -> int:
    """Independent seed for ensemble member ``member``; member 0 keeps ``seed``."""
    if member == 0:
        return seed
    return int(np.random.SeedSequence([seed, member]).generate_state(1, dtype=np.uint32)[0])


def network_config(model: EgnnConfig, config: TrainConfig) -> EgnnConfig:
    """The deterministic and ensemble baselines have no noise input."""
    if config.mode == "crps":
        return model
    return model.model_copy(update={"noise_dim": 0})


def _targets(batch: Sequence[GraphSample]) -> np.ndarray:
    return np.stack([s.target_positions.reshape(-1) for s in batch])


def loss_step_mse(params: EgnnParams, config: EgnnConfig, batch: Sequence[GraphSample]) -> Tuple[float, ParamVector]:
    """Mean squared position error over structures and entries, with its gradient."""
    graphs = make_batch([s.input for s in batch])
    targets = _targets(batch).reshape(-1, 3)

    def build(tape, P):
        z = np.zeros((graphs.n_graphs, config.noise_dim)) if config.is_stochastic else None
        out = egnn_graph(P, config, graphs, z)
        return gc.mean(gc.square(gc.sub(out, targets)))

    loss, grad = gc.value_and_grad(build, params)
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite MSE loss", n_structures=len(batch))
    return loss, grad


def crps_loss_builder(config: EgnnConfig, batch: Sequence[GraphSample], k: int, eps: Optional[np.ndarray]):
    """Tape builder for the batch fair CRPS; ``eps`` holds the frozen base draws."""
    graphs = make_batch([s.input for s in batch], repeats=k)
    targets = _targets(batch)
    n = batch[0].input.n_particles

    def build(tape, P):
        z = noise_from_eps(P, eps) if eps is not None else None
        out = egnn_graph(P, config, graphs, z)
        loss, _, _ = crps_multi_tape(gc.reshape(out, (graphs.n_graphs, 3 * n)), targets, k)
        return loss

    return build


def loss_step_crps(
    params: EgnnParams,
    config: EgnnConfig,
    batch: Sequence[GraphSample],
    k: int,
    key: Sequence[int],
    eps: Optional[np.ndarray] = None,
) -> Tuple[float, ParamVector]:
    """Batch-mean fair CRPS of K noisy passes per structure, with its gradient.

    The base draws come from ``batch_eps(..., key)`` unless ``eps`` is given.
    Gradients reach W_z through ``z = W_z eps``.
    """
    if k < 2:
        raise ValueError("the CRPS loss needs K >= 2")
    if eps is None and config.is_stochastic:
        eps = batch_eps(config.noise_dim, len(batch), k, key)
    loss, grad = gc.value_and_grad(crps_loss_builder(config, batch, k, eps), params)
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite CRPS loss", key=tuple(key), n_structures=len(batch), k=k)
    return loss, grad


def validation_metric(
    params: EgnnParams,
    config: EgnnConfig,
    train_config: TrainConfig,
    data: Sequence[GraphSample],
    seed: int,
) -> float:
    """Fair CRPS with K_val draws in crps mode, MSE otherwise.

    The validation draws are the same every epoch.
    """
    states = [s.input for s in data]
    targets = _targets(data)
    if train_config.mode != "crps":
        pred = predict_ensemble(params, config, states, None, 1)[:, 0]
        return float(np.mean((pred.reshape(len(data), -1) - targets) ** 2))
    k = train_config.k_val
    eps = batch_eps(config.noise_dim, len(states), k, (seed, VAL_NOISE_STREAM)) if config.is_stochastic else None
    samples = predict_ensemble(params, config, states, eps, k).reshape(len(data), k, -1)
    reliability = np.abs(samples - targets[:, None, :]).mean(axis=1)
    spread = np.stack([spread_sorted(s) for s in samples])
    return float(np.mean(reliability - spread))


@dataclass
class TrainState:
    """Everything needed to continue training one network at an epoch boundary."""

    params: EgnnParams
    best_params: EgnnParams
    optimizer: Adam
    seed: int
    member: int = 0
    epoch: int = 0
    step: int = 0
    best_metric: Optional[float] = None
    best_epoch: Optional[int] = None
    bad_epochs: int = 0
    stopped: bool = False
    log: List[Dict[str, object]] = field(default_factory=list)

    @classmethod
    def initial(cls, config: EgnnConfig, train_config: TrainConfig, member: int = 0) -> "TrainState":
        seed = derive_seed(train_config.seed, member)
        params = init_params(config, seed)
        optimizer = Adam(
            params.size,
            beta1=train_config.beta1,
            beta2=train_config.beta2,
            eps=train_config.adam_eps,
            weight_decay=train_config.weight_decay,
        )
        return cls(params=params, best_params=params.copy(), optimizer=optimizer, seed=seed, member=member)

    def save(self, path: os.PathLike, config: EgnnConfig) -> None:
        meta = {
            "seed": self.seed,
            "member": self.member,
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.optimizer.t,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "stopped": self.stopped,
            "log": self.log,
        }
        vectors = {
            "params": self.params.values,
            "best_params": self.best_params.values,
            "adam_m": self.optimizer.m,
            "adam_v": self.optimizer.v,
        }
        write_checkpoint(path, config, vectors, meta)

    @classmethod
    def restore(cls, path: os.PathLike, config: EgnnConfig, train_config: TrainConfig) -> "TrainState":
        saved_config, vectors, meta = read_checkpoint(path)
        layout = ParamVector.from_shapes(param_shapes(config)).layout
        expected = sum(spec.size for spec in layout)
        if saved_config != config or vectors["params"].size != expected:
            raise CompatibilityError(
                "train state does not match the model config",
                path=str(path),
                checkpoint_params=int(vectors["params"].size),
                config_params=expected,
            )
        optimizer = Adam(expected, train_config.beta1, train_config.beta2, train_config.adam_eps, train_config.weight_decay)
        optimizer.m, optimizer.v, optimizer.t = vectors["adam_m"], vectors["adam_v"], int(meta["adam_t"])
        return cls(
            params=ParamVector(layout, vectors["params"]),
            best_params=ParamVector(layout, vectors["best_params"]),
            optimizer=optimizer,
            seed=int(meta["seed"]),
            member=int(meta["member"]),
            epoch=int(meta["epoch"]),
            step=int(meta["step"]),
            best_metric=meta["best_metric"],
            best_epoch=meta["best_epoch"],
            bad_epochs=int(meta["bad_epochs"]),
            stopped=bool(meta["stopped"]),
            log=list(meta["log"]),
        )


def _check_divergence(state: TrainState, metric: float, train_config: TrainConfig) -> None:
    if not np.isfinite(metric):
        reason = "non-finite validation metric"
    elif state.best_metric is not None and state.best_metric > 0 and metric > train_config.divergence_factor * state.best_metric:
        reason = "validation metric exceeded the divergence factor"
    else:
        return
    report = {
        "reason": reason,
        "member": state.member,
        "epoch": state.epoch,
        "val_metric": metric if np.isfinite(metric) else str(metric),
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "divergence_factor": train_config.divergence_factor,
    }
    raise DivergenceError("training diverged", report=report, member=state.member, epoch=state.epoch)


def train_model(
    config: EgnnConfig,
    train_config: TrainConfig,
    train_data: Sequence[GraphSample],
    val_data: Sequence[GraphSample],
    member: int = 0,
    state: Optional[TrainState] = None,
    state_path: Optional[os.PathLike] = None,
) -> TrainState:
    """Train one network until ``epochs``, early stopping or divergence.

    ``config`` is the network config actually trained (see ``network_config``).
    With ``state_path`` the state is saved after every epoch.
    """
    if not train_data or not val_data:
        raise ValueError("training and validation sets must be non-empty")
    state = state or TrainState.initial(config, train_config, member)
    crps = train_config.mode == "crps"
    n = len(train_data)
    bs = train_config.batch_size

    while state.epoch < train_config.epochs and not state.stopped:
        epoch = state.epoch
        started = time.perf_counter()
        lr = cosine_lr(epoch, train_config)
        order = noise_rng(state.seed, SHUFFLE_STREAM, epoch).permutation(n)
        losses, norms, passes = [], [], 0
        for b, start in enumerate(range(0, n, bs)):
            batch = [train_data[i] for i in order[start:start + bs]]
            if crps:
                key = (state.seed, TRAIN_NOISE_STREAM, epoch, b)
                loss, grad = loss_step_crps(state.params, config, batch, train_config.k_train, key)
                passes += len(batch) * train_config.k_train
            else:
                loss, grad = loss_step_mse(state.params, config, batch)
                passes += len(batch)
            update, norm = clip_by_global_norm(grad.values, train_config.grad_clip_norm)
            state.optimizer.step(state.params.values, update, lr)
            state.step += 1
            losses.append(loss * len(batch))
            norms.append(norm)

        metric = validation_metric(state.params, config, train_config, val_data, state.seed)
        row = {
            "member": state.member,
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / n),
            "val_metric": metric,
            "wall_time_s": round(time.perf_counter() - started, 3) if train_config.record_wall_time else 0.0,
            "grad_norm": float(np.mean(norms)),
            "passes": passes,
        }
        state.log.append(row)
        logger.info(
            "member %d epoch %d: train_loss=%.6g val=%.6g grad_norm=%.3g passes=%d",
            state.member, epoch, row["train_loss"], metric, row["grad_norm"], passes,
        )
        _check_divergence(state, metric, train_config)

        if state.best_metric is None or metric < state.best_metric:
            state.best_metric, state.best_epoch, state.bad_epochs = metric, epoch, 0
            state.best_params = state.params.copy()
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= train_config.patience:
                logger.info("member %d: no improvement for %d epochs, stopping", state.member, state.bad_epochs)
                state.stopped = True
        state.epoch = epoch + 1
        if state_path is not None:
            state.save(state_path, config)
    return state


def _train_member(args) -> TrainState:
    return train_model(*args)


def train(
    model_config: EgnnConfig,
    train_config: TrainConfig,
    train_data: Sequence[GraphSample],
    val_data: Sequence[GraphSample],
    state_dir: Optional[os.PathLike] = None,
    resume: Optional[Dict[int, TrainState]] = None,
    workers: int = 1,
) -> List[TrainState]:
    """Train every member of the configured model family.

    Returns one TrainState per member (one for deterministic and crps mode).
    Members are independent, so ``workers > 1`` trains them in separate
    processes with identical results.
    """
    config = network_config(model_config, train_config)
    n_members = train_config.ensemble_size if train_config.mode == "ensemble" else 1
    resume = resume or {}
    jobs = []
    for member in range(n_members):
        path = Path(state_dir) / f"state_{member:02d}.ckpt" if state_dir is not None else None
        jobs.append((config, train_config, train_data, val_data, member, resume.get(member), path))
    if workers > 1 and n_members > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_members)) as pool:
            return list(pool.map(_train_member, jobs))
    return [_train_member(job) for job in jobs]


def write_log(path: os.PathLike, states: Sequence[TrainState]) -> None:
    """CSV training log, rows ordered by member then epoch."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for state in states:
                for row in state.log:
                    writer.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})
    except OSError as exc:
        raise StorageError(f"cannot write {path}", path=str(path)) from exc


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
