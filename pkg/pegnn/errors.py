"""Exception hierarchy for pegnn.

Every error carries a ``detail`` message and the process ``exit_code`` the CLI
uses when the error escapes a command.

Copyright (c) Bryn Gwalad 2025
"""

from typing import Any, Optional, Tuple


class PegnnError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1

    def __init__(self, detail: str, **context: Any) -> None:
        super().__init__(detail)
        self.detail = detail
        self.context = context

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        extra = ", ".join(f"{k}={v!r}" for k, v in sorted(self.context.items()))
        return f"{self.detail} ({extra})"


class ConfigError(PegnnError):
    """Config file missing, unparsable or violating a constraint."""

    exit_code = 2


class StorageError(PegnnError):
    """Reading or writing a dataset, checkpoint, log or manifest failed."""

    exit_code = 3


class DivergenceError(PegnnError):
    """Training diverged; ``report`` holds the structured divergence report."""

    exit_code = 4

    def __init__(self, detail: str, report: Optional[dict] = None, **context: Any) -> None:
        super().__init__(detail, **context)
        self.report = report or {}


class CompatibilityError(PegnnError):
    """Checkpoint does not match the model config it is loaded against."""

    exit_code = 5


class DegenerateConfigurationError(PegnnError):
    """Two particles coincide so the Coulomb force is not finite."""

    def __init__(self, detail: str, pair: Tuple[int, int], **context: Any) -> None:
        super().__init__(detail, pair=pair, **context)
        self.pair = pair


class RejectionRateError(PegnnError):
    """Initial-state rejection sampling rejected more than half the draws."""


class ShapeError(PegnnError):
    """Operands of a differentiable primitive have inconsistent shapes."""

    def __init__(self, primitive: str, *shapes: Tuple[int, ...]) -> None:
        super().__init__(f"shape mismatch in {primitive}", primitive=primitive, shapes=shapes)
        self.primitive = primitive
        self.shapes = shapes


class NonFiniteLossError(PegnnError):
    """A training loss evaluated to NaN or infinity."""
