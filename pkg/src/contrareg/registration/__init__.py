"""Monomodal rigid registration backends and the multistart wrapper.

All backends estimate a transform mapping reference coordinates to floating
coordinates and report a ``final_objective`` where lower is better (the MI
backend stores the negated mutual information), so multistart selection is
uniform across methods.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import RigidTransform2D
from ..image import Image


class RegistrationFailure(RuntimeError):
    """Raised when a backend cannot produce a transform at all."""


@dataclass
class RegistrationResult:
    transform: RigidTransform2D | None
    method: str
    final_objective: float
    trace: list[float] = field(default_factory=list)
    runtime_seconds: float = 0.0
    converged: bool = True
    message: str = ""

    def to_dict(self) -> dict:
        t = self.transform
        return {
            "method": self.method,
            "transform": None
            if t is None
            else {"angle": t.angle, "translation": list(t.translation), "center": list(t.center)},
            "final_objective": self.final_objective,
            "trace_length": len(self.trace),
            "trace_first": self.trace[0] if self.trace else None,
            "trace_last": self.trace[-1] if self.trace else None,
            "converged": self.converged,
            "message": self.message,
        }


def transform_from_dict(payload: dict | None) -> RigidTransform2D | None:
    if payload is None:
        return None
    return RigidTransform2D(
        angle=float(payload["angle"]),
        translation=tuple(payload["translation"]),
        center=tuple(payload["center"]),
    )


def register_multistart(
    method_fn,
    ref: Image,
    flt: Image,
    starts: list[RigidTransform2D],
    cfg,
    rng: np.random.Generator,
) -> RegistrationResult:
    """Run ``method_fn(ref, flt, cfg, rng, init)`` from every start and return
    the result with the best (lowest) final objective."""
    if not starts:
        raise ValueError("need at least one start")
    best: RegistrationResult | None = None
    failures: list[str] = []
    for init in starts:
        child = np.random.default_rng(rng.integers(0, 2**63 - 1))
        try:
            result = method_fn(ref, flt, cfg, child, init)
        except RegistrationFailure as exc:
            failures.append(str(exc))
            continue
        if result.transform is None:
            failures.append(result.message or "no transform")
            continue
        if best is None or result.final_objective < best.final_objective:
            best = result
    if best is None:
        raise RegistrationFailure(f"all {len(starts)} starts failed: {failures}")
    return best


def rotation_starts(center: tuple[float, float], rotations_rad) -> list[RigidTransform2D]:
    """Build multistart initializations at the given rotations about a center."""
    return [RigidTransform2D(angle=float(r), center=center) for r in rotations_rad]


from .features import FeatureConfig, register_features  # noqa: E402
from .intensity import IntensityConfig, register_intensity  # noqa: E402
from .mi import MIConfig, mattes_mi, register_mi  # noqa: E402

__all__ = [
    "RegistrationFailure",
    "RegistrationResult",
    "register_multistart",
    "rotation_starts",
    "transform_from_dict",
    "MIConfig",
    "mattes_mi",
    "register_mi",
    "IntensityConfig",
    "register_intensity",
    "FeatureConfig",
    "register_features",
]
