"""Velocity-aware E(n)-equivariant graph network with optional noise input.

Each of the L layers holds four two-linear-layer MLPs on the fully
connected graph (self-edges excluded)::

    m_ij = phi_e(h_i, h_j, |x_i - x_j|^2, |x_i - x_j|, q_i q_j)
    h_i' = phi_h(h_i, sum_j m_ij)
    v_i' = phi_v(h_i) * v_i + C * sum_j (x_i - x_j) phi_x(m_ij),  C = 1/(N-1)
    x_i' = x_i + v_i'

Node features start as a linear embedding of the charge. The network output
is the final position matrix. When a noise vector is supplied, the first
sub-layer of phi_e and phi_h adds ``W_noise @ z``; the embedding, phi_x and
phi_v never see z, so every fixed z gives an exactly E(n)-equivariant map.

Canonical parameter ordering (checkpoint layout version 1)::

    embedding.weight, embedding.bias
    for each layer l:
        layers.l.phi_e.{0,1}.{weight,bias}
        layers.l.phi_h.{0,1}.{weight,bias}
        layers.l.phi_x.{0,1}.{weight,bias}
        layers.l.phi_v.{0,1}.{weight,bias}
        layers.l.phi_e.noise, layers.l.phi_h.noise     (d_z > 0 only)
    noise.W_z                                          (d_z > 0 only)

Weights are stored (out, in). Inside phi_e the input columns are
(h_i, h_j, d^2, d, q_i q_j).

Copyright (c) Bryn Gwalad 2025
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import grad_core as gc
from .errors import ConfigError
from .grad_core import ParamVector
from .models import EgnnConfig
from .nbody_sim import ParticleState
from .noise_injection import inject

# Parameters of one network; the flat layout is the canonical ordering above.
EgnnParams = ParamVector

BLOCKS = ("phi_e", "phi_h", "phi_x", "phi_v")
PERTURBED_BLOCKS = ("phi_e", "phi_h")
# Structures evaluated per tape when predicting large ensembles.
PREDICT_CHUNK = 16


class ParamCount(NamedTuple):
    backbone: int
    noise_overhead: int
    ratio: float


def block_widths(config: EgnnConfig) -> dict:
    """(input, hidden, output) widths of the four per-layer MLPs."""
    d = config.hidden_width
    return {
        "phi_e": (2 * d + 3, d, d),
        "phi_h": (2 * d, d, d),
        "phi_x": (d, d, 1),
        "phi_v": (d, d, 1),
    }


def param_shapes(config: EgnnConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    d, dz = config.hidden_width, config.noise_dim
    shapes: List[Tuple[str, Tuple[int, ...]]] = [("embedding.weight", (d, 1)), ("embedding.bias", (d,))]
    widths = block_widths(config)
    for layer in range(config.n_layers):
        for block in BLOCKS:
            n_in, n_hidden, n_out = widths[block]
            prefix = f"layers.{layer}.{block}"
            shapes += [
                (f"{prefix}.0.weight", (n_hidden, n_in)),
                (f"{prefix}.0.bias", (n_hidden,)),
                (f"{prefix}.1.weight", (n_out, n_hidden)),
                (f"{prefix}.1.bias", (n_out,)),
            ]
        if dz > 0:
            shapes += [(f"layers.{layer}.{block}.noise", (d, dz)) for block in PERTURBED_BLOCKS]
    if dz > 0:
        shapes.append(("noise.W_z", (dz, dz)))
    return shapes


def param_count(config: EgnnConfig) -> ParamCount:
    """Backbone size P, noise overhead dP = d_z^2 + 2 L d_h d_z, and (P + dP) / P."""
    def mlp(n_in: int, n_hidden: int, n_out: int) -> int:
        return n_in * n_hidden + n_hidden + n_hidden * n_out + n_out

    per_layer = sum(mlp(*w) for w in block_widths(config).values())
    backbone = config.n_layers * per_layer + 2 * config.hidden_width
    dz = config.noise_dim
    overhead = dz * dz + 2 * config.n_layers * config.hidden_width * dz
    return ParamCount(backbone, overhead, (backbone + overhead) / backbone)


def empty_params(config: EgnnConfig) -> EgnnParams:
    return ParamVector.from_shapes(param_shapes(config))


def init_params(config: EgnnConfig, seed: int) -> EgnnParams:
    """Fan-in uniform init for the backbone, zero noise projections.

    W_z follows ``config.noise_generator_init``.
    """
    params = empty_params(config)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x6567])))
    for spec in params.layout:
        name = spec.name
        if name.endswith(".noise"):
            continue
        if name == "noise.W_z":
            w_z = params.view(name)
            if config.noise_generator_init == "identity":
                w_z[...] = np.eye(config.noise_dim)
            elif config.noise_generator_init == "fan_in":
                bound = 1.0 / np.sqrt(config.noise_dim)
                w_z[...] = rng.uniform(-bound, bound, size=spec.shape)
            continue
        weight_name = name[: -len("bias")] + "weight" if name.endswith(".bias") else name
        fan_in = params.spec(weight_name).shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        params.view(name)[...] = rng.uniform(-bound, bound, size=spec.shape)
    return params


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of fully connected graphs with the same particle count.

    Node ``g * N + i`` is particle ``i`` of graph ``g``. Edges are ordered by
    (graph, receiver i, sender j) and exclude self-edges.
    """

    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    n_graphs: int
    n_particles: int

    @property
    def n_nodes(self) -> int:
        return self.n_graphs * self.n_particles


def make_batch(states: Sequence[ParticleState], repeats: int = 1) -> GraphBatch:
    """Batch ``states``, each repeated ``repeats`` times back to back.

    Graph ``s * repeats + k`` is copy ``k`` of state ``s``.
    """
    if not states:
        raise ValueError("empty batch")
    n = states[0].n_particles
    if any(s.n_particles != n for s in states):
        raise ValueError("all states in a batch must have the same particle count")
    if n < 2:
        raise ValueError("graphs need at least two particles")
    g = len(states) * repeats
    pos = np.repeat(np.stack([s.positions for s in states]), repeats, axis=0).reshape(g * n, 3)
    vel = np.repeat(np.stack([s.velocities for s in states]), repeats, axis=0).reshape(g * n, 3)
    q = np.repeat(np.stack([s.charges for s in states]), repeats, axis=0).reshape(g * n)
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    offsets = (np.arange(g) * n)[:, None]
    src = (offsets + i[None, :]).reshape(-1)
    dst = (offsets + j[None, :]).reshape(-1)
    return GraphBatch(
        positions=pos.astype(np.float64),
        velocities=vel.astype(np.float64),
        charges=q.astype(np.float64),
        src=src,
        dst=dst,
        node_graph=np.repeat(np.arange(g), n),
        edge_graph=np.repeat(np.arange(g), n * (n - 1)),
        n_graphs=g,
        n_particles=n,
    )


def _mlp(P, prefix: str, x, z=None, rows_graph=None, output_activation: bool = False):
    noise = P.get(f"{prefix}.noise") if z is not None else None
    h = inject((P[f"{prefix}.0.weight"], P[f"{prefix}.0.bias"]), noise, x, z, rows_graph)
    h = gc.linear(gc.silu(h), P[f"{prefix}.1.weight"], P[f"{prefix}.1.bias"])
    return gc.silu(h) if output_activation else h


def noise_from_eps(P, eps):
    """Per-graph z rows ``eps @ W_z^T``, recorded so gradients reach W_z."""
    return gc.linear(eps, P["noise.W_z"])


def egnn_graph(P, config: EgnnConfig, batch: GraphBatch, z=None, positions=None, velocities=None):
    """Record the network on the tape of ``P`` and return the positions (M, 3).

    ``z`` is None or one row per graph (already mapped through W_z).
    ``positions``/``velocities`` default to the batch arrays; pass tape leaves
    to differentiate with respect to the inputs.
    """
    if z is not None and config.noise_dim == 0:
        raise ConfigError("noise vector supplied to a deterministic network (noise_dim=0)")
    x = batch.positions if positions is None else positions
    v = batch.velocities if velocities is None else velocities
    m_nodes, n = batch.n_nodes, batch.n_particles
    src, dst = batch.src, batch.dst
    qq = (batch.charges[src] * batch.charges[dst])[:, None]
    scale = 1.0 / (n - 1)

    h = gc.linear(batch.charges[:, None], P["embedding.weight"], P["embedding.bias"])
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        diff = gc.sub(gc.gather(x, src), gc.gather(x, dst))
        d2 = gc.sum_(gc.square(diff), axis=1, keepdims=True)
        edge_in = gc.concat([gc.gather(h, src), gc.gather(h, dst), d2, gc.sqrt(d2), qq], axis=1)
        m = _mlp(P, f"{prefix}.phi_e", edge_in, z, batch.edge_graph, output_activation=True)
        agg = gc.scatter_add(m, src, m_nodes)
        h_next = _mlp(P, f"{prefix}.phi_h", gc.concat([h, agg], axis=1), z, batch.node_graph)
        push = gc.scatter_add(gc.mul(diff, _mlp(P, f"{prefix}.phi_x", m)), src, m_nodes)
        v = gc.add(gc.mul(_mlp(P, f"{prefix}.phi_v", h), v), gc.mul(push, scale))
        x = gc.add(x, v)
        h = h_next
    return x


def _check_z(config: EgnnConfig, z: Optional[np.ndarray], n_graphs: int) -> Optional[np.ndarray]:
    if z is None:
        return None
    if config.noise_dim == 0:
        raise ConfigError("noise vector supplied to a deterministic network (noise_dim=0)")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = np.broadcast_to(z, (n_graphs, z.shape[0]))
    if z.shape != (n_graphs, config.noise_dim):
        raise ConfigError("noise vector has the wrong length", expected=config.noise_dim, shape=z.shape)
    return z


def egnn_forward(params: EgnnParams, config: EgnnConfig, state: ParticleState, z: Optional[np.ndarray] = None) -> np.ndarray:
    """Predicted positions (N, 3) for one input state and an optional z."""
    batch = make_batch([state])
    z = _check_z(config, z, 1)

    def build(tape, P):
        return egnn_graph(P, config, batch, z)

    (out,), _ = gc.forward(build, params, record=False)
    return out.reshape(state.n_particles, 3)


def predict_point(params: EgnnParams, config: EgnnConfig, state: ParticleState) -> np.ndarray:
    """One-pass point prediction with the stochastic component switched off (z = 0)."""
    z = np.zeros(config.noise_dim) if config.is_stochastic else None
    return egnn_forward(params, config, state, z)


def predict_ensemble(
    params: EgnnParams,
    config: EgnnConfig,
    states: Sequence[ParticleState],
    eps: Optional[np.ndarray],
    k: int,
) -> np.ndarray:
    """K samples per state, shape (len(states), K, N, 3).

    ``eps`` holds the base draws, one row per (state, member) in state-major
    order, and is mapped through W_z. With ``eps=None`` the network runs
    without noise and all K members coincide.
    """
    n = states[0].n_particles
    out = np.empty((len(states), k, n, 3))
    for start in range(0, len(states), PREDICT_CHUNK):
        chunk = states[start:start + PREDICT_CHUNK]
        batch = make_batch(chunk, repeats=k)
        rows = None if eps is None else eps[start * k:(start + len(chunk)) * k]

        def build(tape, P):
            z = None if rows is None else noise_from_eps(P, rows)
            return egnn_graph(P, config, batch, z)

        (pos,), _ = gc.forward(build, params, record=False)
        out[start:start + len(chunk)] = pos.reshape(len(chunk), k, n, 3)
    return out
