"""Perturbed E(n)-equivariant graph network package.

Turns a deterministic velocity-aware EGNN into a probabilistic ensemble via
learned functional noise perturbations and trains it with the fair CRPS.

Copyright (c) Bryn Gwalad 2025
"""

__version__ = "0.3.0"

__all__ = [
    "cli",
    "config",
    "egnn_core",
    "errors",
    "grad_core",
    "metrics",
    "models",
    "nbody_sim",
    "noise_injection",
    "scoring",
    "storage",
    "training",
]
