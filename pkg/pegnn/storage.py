"""On-disk formats for datasets and checkpoints.

Both formats are a single-line JSON header terminated by ``\\n`` followed by
a raw little-endian float payload.

Dataset file (``<split>.bin``), payload ``<f4``; per sample, in order::

    input positions   N*3   row-major (particle, axis)
    input velocities  N*3
    input charges     N
    target positions  N*3

so one record is 10*N floats and the payload is exactly
``n_samples * 10 * N * 4`` bytes.

Checkpoint file (``*.ckpt``), payload ``<f8``: the named vectors listed in
the header, each ``n_params`` long and in the canonical parameter ordering,
concatenated in header order. ``params`` is always first.

Copyright (c) Bryn Gwalad 2025
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import StorageError
from .models import EgnnConfig, SimConfig
from .nbody_sim import GraphSample, ParticleState

DATASET_FORMAT = "pegnn-dataset"
DATASET_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "pegnn-checkpoint"
ORDERING_VERSION = 1


def _dump_header(header: Dict[str, Any]) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def _split_header(raw: bytes, path: os.PathLike) -> Tuple[Dict[str, Any], bytes]:
    end = raw.find(b"\n")
    if end < 0:
        raise StorageError("missing header line", path=str(path))
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except ValueError as exc:
        raise StorageError("unreadable header", path=str(path)) from exc
    return header, raw[end + 1:]


def _read_bytes(path: os.PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}", path=str(path)) from exc


def _write_bytes(path: os.PathLike, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write {path}", path=str(path)) from exc


def write_dataset(path: os.PathLike, samples: List[GraphSample], config: SimConfig, split: str) -> None:
    n = config.n_particles
    header = {
        "format": DATASET_FORMAT,
        "schema_version": DATASET_SCHEMA_VERSION,
        "split": split,
        "config": config.model_dump(),
        "n_samples": len(samples),
        "n_particles": n,
        "dtype": "<f4",
        "record_floats": 10 * n,
    }
    records = np.empty((len(samples), 10 * n), dtype="<f4")
    for row, s in zip(records, samples):
        row[: 3 * n] = s.input.positions.reshape(-1)
        row[3 * n: 6 * n] = s.input.velocities.reshape(-1)
        row[6 * n: 7 * n] = s.input.charges
        row[7 * n:] = s.target_positions.reshape(-1)
    _write_bytes(path, _dump_header(header) + records.tobytes())


def read_dataset(path: os.PathLike) -> Tuple[List[GraphSample], Dict[str, Any]]:
    """Load a dataset file; arrays come back as float64."""
    header, payload = _split_header(_read_bytes(path), path)
    if header.get("format") != DATASET_FORMAT or header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise StorageError("not a supported dataset file", path=str(path), header=header.get("format"))
    n, count = int(header["n_particles"]), int(header["n_samples"])
    expected = count * 10 * n * 4
    if len(payload) != expected:
        raise StorageError("payload size does not match header", path=str(path), expected=expected, actual=len(payload))
    records = np.frombuffer(payload, dtype="<f4").reshape(count, 10 * n).astype(np.float64)
    samples = []
    for row in records:
        state = ParticleState(
            positions=row[: 3 * n].reshape(n, 3).copy(),
            velocities=row[3 * n: 6 * n].reshape(n, 3).copy(),
            charges=row[6 * n: 7 * n].copy(),
        )
        samples.append(GraphSample(input=state, target_positions=row[7 * n:].reshape(n, 3).copy()))
    return samples, header


def write_checkpoint(
    path: os.PathLike,
    config: EgnnConfig,
    vectors: Dict[str, np.ndarray],
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    if "params" not in vectors:
        raise StorageError("checkpoint needs a params vector", path=str(path))
    names = ["params"] + sorted(k for k in vectors if k != "params")
    n_params = int(vectors["params"].size)
    for name in names:
        if vectors[name].size != n_params:
            raise StorageError("checkpoint vectors differ in length", path=str(path), vector=name)
    header = {
        "format": CHECKPOINT_FORMAT,
        "ordering_version": ORDERING_VERSION,
        "config": config.model_dump(),
        "n_params": n_params,
        "vectors": names,
        "meta": meta or {},
    }
    payload = b"".join(np.ascontiguousarray(vectors[name], dtype="<f8").tobytes() for name in names)
    _write_bytes(path, _dump_header(header) + payload)


def read_checkpoint(path: os.PathLike) -> Tuple[EgnnConfig, Dict[str, np.ndarray], Dict[str, Any]]:
    header, payload = _split_header(_read_bytes(path), path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise StorageError("not a checkpoint file", path=str(path))
    if header.get("ordering_version") != ORDERING_VERSION:
        raise StorageError("unsupported parameter ordering", path=str(path), version=header.get("ordering_version"))
    n_params, names = int(header["n_params"]), list(header["vectors"])
    if len(payload) != 8 * n_params * len(names):
        raise StorageError("payload size does not match header", path=str(path))
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    vectors = {name: flat[i * n_params:(i + 1) * n_params].copy() for i, name in enumerate(names)}
    return EgnnConfig(**header["config"]), vectors, header.get("meta", {})
