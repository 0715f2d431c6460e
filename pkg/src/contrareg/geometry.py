"""Rigid 2-D transforms and exact quarter-turn group actions.

Coordinate convention, used package-wide: x grows rightward (columns),
y grows downward (rows). Points are (x, y). Angles are in radians and
positive angles rotate (1, 0) onto (0, 1) in this frame. Transforms
rotate about an explicit pivot (``center``) and then translate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _as_points(points) -> np.ndarray:
    """Coerce a point or point set to a float array of shape (..., 2)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise ValueError(f"points must have trailing dimension 2, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


@dataclass(frozen=True)
class RigidTransform2D:
    """Rotation by ``angle`` about ``center``, followed by ``translation``.

    Maps p to R(angle) @ (p - center) + center + translation. All units
    are pixels.
    """

    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        vals = (self.angle, *self.translation, *self.center)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("transform parameters must be finite")

    @property
    def rotation_matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]], dtype=np.float64)

    def _linear_offset(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (R, b) with apply(p) = R @ p + b."""
        r = self.rotation_matrix
        c = np.asarray(self.center, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        return r, c - r @ c + t

    def apply(self, points) -> np.ndarray:
        """Map one (2,) point or an (..., 2) point set; returns float64."""
        pts = _as_points(points)
        r, b = self._linear_offset()
        return pts @ r.T + b

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """Return the transform applying ``other`` first, then ``self``.

        The result is re-expressed about ``self.center``.
        """
        r1, b1 = self._linear_offset()
        r2, b2 = other._linear_offset()
        angle = self.angle + other.angle
        b = r1 @ b2 + b1
        return _from_linear_offset(angle, b, self.center)

    def inverse(self) -> "RigidTransform2D":
        """Return the inverse mapping, expressed about the same center."""
        r, b = self._linear_offset()
        return _from_linear_offset(-self.angle, -r.T @ b, self.center)

    def with_center(self, center: tuple[float, float]) -> "RigidTransform2D":
        """Re-express the same mapping about a different pivot."""
        r, b = self._linear_offset()
        return _from_linear_offset(self.angle, b, center)

    def as_matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix acting on column vectors (x, y, 1)."""
        r, b = self._linear_offset()
        m = np.eye(3)
        m[:2, :2] = r
        m[:2, 2] = b
        return m

    def is_identity(self, tol: float = 1e-12) -> bool:
        r, b = self._linear_offset()
        return bool(np.allclose(r, np.eye(2), atol=tol) and np.allclose(b, 0.0, atol=tol))

    @staticmethod
    def identity(center: tuple[float, float] = (0.0, 0.0)) -> "RigidTransform2D":
        return RigidTransform2D(0.0, (0.0, 0.0), center)


def _from_linear_offset(angle, b, center) -> RigidTransform2D:
    """Build the transform with rotation ``angle`` and affine offset ``b``
    about the requested ``center``."""
    c, s = math.cos(angle), math.sin(angle)
    r = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, dtype=np.float64)
    t = np.asarray(b, dtype=np.float64) - ctr + r @ ctr
    return RigidTransform2D(float(angle), (float(t[0]), float(t[1])), (float(ctr[0]), float(ctr[1])))


def c4_compose(k1: int, k2: int) -> int:
    """Group law of the quarter-turn group: both actions applied in sequence."""
    return (int(k1) + int(k2)) % 4


def c4_inverse(k: int) -> int:
    return (-int(k)) % 4


def validate_c4(k: int) -> int:
    k = int(k)
    if k not in (0, 1, 2, 3):
        raise ValueError(f"quarter-turn count must be in {{0,1,2,3}}, got {k}")
    return k
