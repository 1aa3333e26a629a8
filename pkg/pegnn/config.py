"""Flat key-value config files.

A config file is a dotenv-style text file with one ``KEY=value`` per line.
Keys are the upper-cased field names of the three config sections, prefixed
with ``SIM_``, ``MODEL_`` or ``TRAIN_``; ``SCHEMA_VERSION`` must be 1.
Environment variables with the same key override the file, the way the rest
of the project reads its settings from the environment.

Example::

    SCHEMA_VERSION=1
    SIM_N_PARTICLES=5
    SIM_CHARGE_VALUES=-1,1
    MODEL_NOISE_DIM=32
    TRAIN_MODE=crps
    TRAIN_GRAD_CLIP_NORM=none

Copyright (c) Bryn Gwalad 2025
"""

import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Type

from dotenv import dotenv_values
from sqlmodel import SQLModel

from .errors import ConfigError
from .models import EgnnConfig, RunConfig, SimConfig, TrainConfig

SCHEMA_VERSION = 1

SECTIONS: Dict[str, Type[SQLModel]] = {
    "SIM_": SimConfig,
    "MODEL_": EgnnConfig,
    "TRAIN_": TrainConfig,
}
_SECTION_ATTR = {"SIM_": "sim", "MODEL_": "model", "TRAIN_": "train"}


def known_keys() -> Dict[str, str]:
    """Map every accepted key to its section prefix."""
    keys = {"SCHEMA_VERSION": ""}
    for prefix, model in SECTIONS.items():
        for name in model.model_fields:
            keys[prefix + name.upper()] = prefix
    return keys


def _coerce(name: str, raw: str):
    if name == "charge_values":
        try:
            return [float(tok) for tok in raw.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError("charge_values must be comma-separated numbers", raw=raw) from exc
    if raw.strip().lower() in ("none", "null", ""):
        return None
    return raw.strip()


def parse_config(values: Mapping[str, Optional[str]], source: str = "<mapping>") -> RunConfig:
    """Build a validated RunConfig from flat key-value pairs."""
    keys = known_keys()
    sections: Dict[str, dict] = {prefix: {} for prefix in SECTIONS}
    for key, raw in values.items():
        if key not in keys:
            raise ConfigError("unknown config key", key=key, source=source)
        if key == "SCHEMA_VERSION":
            if str(raw).strip() != str(SCHEMA_VERSION):
                raise ConfigError("unsupported schema version", version=raw, source=source)
            continue
        prefix = keys[key]
        name = key[len(prefix):].lower()
        value = _coerce(name, "" if raw is None else str(raw))
        if value is not None or name == "grad_clip_norm":
            sections[prefix][name] = value
    try:
        parts = {
            _SECTION_ATTR[prefix]: SECTIONS[prefix](**fields)
            for prefix, fields in sections.items()
        }
    except ValueError as exc:
        raise ConfigError("invalid config value", source=source, reason=str(exc)) from exc
    run = RunConfig(schema_version=SCHEMA_VERSION, **parts)
    run.sim.check()
    run.model.check()
    run.train.check()
    return run


def load_config(path: Optional[os.PathLike] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Read a config file, apply environment overrides and validate.

    ``path=None`` gives the defaults (still subject to environment overrides).
    """
    values: Dict[str, Optional[str]] = {}
    source = "<defaults>"
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}", path=str(p))
        source = str(p)
        values.update(dotenv_values(p))
    env = os.environ if environ is None else environ
    for key in known_keys():
        if key in env:
            values[key] = env[key]
    return parse_config(values, source=source)


def flatten_config(run: RunConfig) -> Dict[str, str]:
    """Render a RunConfig back to the flat key-value form."""
    flat = {"SCHEMA_VERSION": str(SCHEMA_VERSION)}
    for prefix, attr in _SECTION_ATTR.items():
        section = getattr(run, attr)
        for name, value in section.model_dump().items():
            if isinstance(value, list):
                rendered = ",".join(repr(float(v)) for v in value)
            elif value is None:
                rendered = "none"
            else:
                rendered = str(value)
            flat[prefix + name.upper()] = rendered
    return flat


def write_config(run: RunConfig, path: os.PathLike) -> None:
    lines = [f"{key}={value}" for key, value in flatten_config(run).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
