"""Graph-level noise sampling and first-sub-layer injection.

A noise vector is drawn as ``z = W_z @ eps`` with ``eps ~ N(0, I)``, i.e.
``z ~ N(0, W_z W_z^T)`` in reparameterised form so gradients reach ``W_z``.
One ``z`` is drawn per graph per ensemble member and broadcast to every node
and edge of that graph; it enters each perturbed block only through the
first linear sub-layer::

    h1 = W1 @ x + b1 + W_noise @ z

Random streams are counter-based (Philox) and keyed by integers such as
(seed, epoch, batch index, structure in batch), so draws do not depend on
evaluation order.

Copyright (c) Bryn Gwalad 2025
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import grad_core as gc


@dataclass(frozen=True)
class NoiseDraw:
    z: np.ndarray
    draw_id: int
    eps: np.ndarray


@dataclass(frozen=True)
class EnsembleNoise:
    """K draws for one graph plus the key of the stream they came from."""

    draws: Tuple[NoiseDraw, ...]
    key: Tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return len(self.draws)

    def z_matrix(self) -> np.ndarray:
        return np.stack([d.z for d in self.draws])

    def eps_matrix(self) -> np.ndarray:
        return np.stack([d.eps for d in self.draws])


def noise_rng(*key: int) -> np.random.Generator:
    """Philox generator for an integer key such as (seed, epoch, batch, sample)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def sample_noise(w_z: np.ndarray, rng: np.random.Generator, draw_id: int = 0) -> NoiseDraw:
    w_z = np.asarray(w_z, dtype=np.float64)
    if w_z.ndim != 2 or w_z.shape[0] != w_z.shape[1] or w_z.shape[0] < 1:
        raise ValueError(f"W_z must be a non-empty square matrix, got {w_z.shape}")
    eps = rng.standard_normal(w_z.shape[1])
    return NoiseDraw(z=w_z @ eps, draw_id=draw_id, eps=eps)


def draw_ensemble(w_z: np.ndarray, k: int, rng: np.random.Generator, key: Sequence[int] = ()) -> EnsembleNoise:
    if k < 1:
        raise ValueError("K must be >= 1")
    return EnsembleNoise(draws=tuple(sample_noise(w_z, rng, draw_id=i) for i in range(k)), key=tuple(key))


def batch_eps(
    noise_dim: int,
    n_structures: int,
    k: int,
    key: Sequence[int],
    start: int = 0,
) -> np.ndarray:
    """Base draws for a batch, shape (n_structures * k, noise_dim).

    Structure ``s`` uses the stream ``key + (start + s,)``; its rows are the ``eps``
    of ``draw_ensemble`` on that stream, so they do not depend on W_z.
    """
    rows = []
    eye = np.eye(noise_dim)
    for s in range(start, start + n_structures):
        ens = draw_ensemble(eye, k, noise_rng(*key, s), key=tuple(key) + (s,))
        rows.append(ens.eps_matrix())
    return np.concatenate(rows, axis=0)


def inject(
    block_first_linear: Tuple[gc.Operand, gc.Operand],
    w_noise: gc.Operand,
    x: gc.Operand,
    z: gc.Operand,
    rows_graph: Optional[np.ndarray] = None,
):
    """First sub-layer of a perturbed block.

    ``z`` is either one d_z vector shared by every row of ``x`` or a matrix
    with one row per graph, in which case ``rows_graph[r]`` names the graph
    of row ``r``. With ``w_noise`` or ``z`` None the unperturbed affine map
    is returned.
    """
    weight, bias = block_first_linear
    h = gc.linear(x, weight, bias)
    if w_noise is None or z is None:
        return h
    zv = z.value if isinstance(z, gc.Var) else np.asarray(z, dtype=np.float64)
    if zv.ndim == 1:
        z = gc.reshape(z, (1, zv.shape[0]))
        return gc.add(h, gc.linear(z, w_noise))
    if rows_graph is None:
        raise ValueError("rows_graph is required when z has one row per graph")
    per_graph = gc.linear(z, w_noise)
    return gc.add(h, gc.gather(per_graph, rows_graph))
