"""Measurement tooling for rotational equivariance and reproducibility:
stabilized-representation correlation over rotation angles, and pairwise
correlation between representations from repeated trainings.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .encoder import Representation
from .evaluation import IntervalEstimate, bootstrap_ci
from .geometry import RigidTransform2D
from .image import Image, warp


def pearson(a, b) -> float:
    """Pearson correlation of two flat arrays; undefined for constant input."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two entries")
    a = a - a.mean()
    b = b - b.mean()
    va = float(a @ a)
    vb = float(b @ b)
    if va == 0.0 or vb == 0.0:
        raise ValueError("constant input: correlation undefined")
    return float((a @ b) / math.sqrt(va * vb))


@dataclass
class EquivarianceCurve:
    angles_deg: list[float]
    correlations: list[float]

    def __post_init__(self):
        if len(self.angles_deg) != len(self.correlations):
            raise ValueError("angles and correlations must have equal length")
        if any(b <= a for a, b in zip(self.angles_deg, self.angles_deg[1:])):
            raise ValueError("angles must be strictly increasing")

    def at(self, angle_deg: float) -> float:
        return self.correlations[self.angles_deg.index(angle_deg)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["angle_deg", "correlation"])
            for a, c in zip(self.angles_deg, self.correlations):
                writer.writerow([repr(float(a)), repr(float(c))])

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(
                {"angles_deg": self.angles_deg, "correlations": self.correlations},
                f,
                indent=2,
                sort_keys=True,
            )


def stabilized_mask(size: int, safety_px: int = 2) -> np.ndarray:
    """Central square guaranteed in-support for any rotation about the center:
    the axis-aligned square inscribed in the inscribed disc."""
    half = size / 2.0 / math.sqrt(2.0) - safety_px
    if half < 1:
        raise ValueError(f"image of size {size} too small for a stabilized comparison")
    c = (size - 1) / 2.0
    lo = int(math.ceil(c - half))
    hi = int(math.floor(c + half))
    mask = np.zeros((size, size), dtype=bool)
    mask[lo : hi + 1, lo : hi + 1] = True
    return mask


def equivariance_curve(model_fn, img: Image, step_degrees: float, interpolation: str = "linear") -> EquivarianceCurve:
    """Correlation between the representation of ``img`` and the stabilized
    representation of its rotated copies, for angles 0 <= theta < 360.

    ``model_fn`` maps an Image to a Representation. For each angle the input
    is rotated about its center, encoded, rotated back, and compared with the
    unrotated representation over the central always-in-support square.
    """
    if not img.is_square():
        raise ValueError(f"need a square image, got {img.height}x{img.width}")
    if step_degrees <= 0 or 360.0 % step_degrees != 0:
        raise ValueError(f"step must divide 360, got {step_degrees}")
    size = img.height
    center = img.spatial_center
    mask = stabilized_mask(size)
    base = np.asarray(model_fn(img).values, dtype=np.float64)
    angles = [i * step_degrees for i in range(int(360 / step_degrees))]
    corrs = []
    for theta in angles:
        if theta == 0.0:
            corrs.append(1.0)
            continue
        rot = RigidTransform2D(angle=math.radians(theta), center=center)
        rotated = warp(img, rot, interpolation=interpolation).image
        rep = model_fn(rotated)
        back = RigidTransform2D(angle=-math.radians(theta), center=center)
        stabilized = warp(rep.as_image(), back, interpolation=interpolation).image.pixels
        corrs.append(pearson(base[:, mask], np.asarray(stabilized, dtype=np.float64)[:, mask]))
    return EquivarianceCurve(angles_deg=[float(a) for a in angles], correlations=corrs)


@dataclass
class CorrelationReport:
    mean: float
    ci: IntervalEstimate
    n_pairs: int

    def as_dict(self) -> dict:
        return {
            "mean_pairwise_correlation": self.mean,
            "ci_lo": self.ci.lo,
            "ci_hi": self.ci.hi,
            "level": self.ci.level,
            "n_pairs": self.n_pairs,
        }


def pairwise_correlation_experiment(
    reps: list[Representation],
    resamples: int = 10000,
    seed: int = 0,
    level: float = 0.95,
) -> CorrelationReport:
    """Mean Pearson correlation over all unordered representation pairs, with
    an empirical-bootstrap confidence interval over the pair set.

    Channels are compared raw (jointly flattened), with no permutation or
    sign alignment between runs.
    """
    if len(reps) < 2:
        raise ValueError("need at least two representations")
    shapes = {r.values.shape for r in reps}
    if len(shapes) != 1:
        raise ValueError(f"representation shapes differ: {sorted(shapes)}")
    corrs = []
    for a, b in ((reps[i], reps[j]) for i in range(len(reps)) for j in range(i + 1, len(reps))):
        corrs.append(pearson(a.values, b.values))
    corrs = np.asarray(corrs)
    if np.allclose(corrs, corrs[0]):
        ci = IntervalEstimate(
            point=float(corrs[0]), lo=float(corrs[0]), hi=float(corrs[0]), method="bootstrap", level=level
        )
    else:
        ci = bootstrap_ci(corrs, level=level, resamples=resamples, seed=seed)
    return CorrelationReport(mean=float(corrs.mean()), ci=ci, n_pairs=len(corrs))
