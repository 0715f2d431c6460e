"""Mutual-information registration: a Mattes-style MI estimate from a soft
joint histogram over sampled positions, optimized by a (1+1) evolutionary
strategy over (angle, tx, ty).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..geometry import RigidTransform2D
from ..image import Image
from . import RegistrationFailure, RegistrationResult


@dataclass
class MIConfig:
    bins: int = 80
    spatial_samples: int = 500
    es_initial_radius: float = 1e-5
    es_min_radius: float = 1.5e-8
    es_growth: float = 1.0 + 1e-4
    max_iterations: int = 1500
    min_overlap_samples: int = 10

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 histogram bins")
        if self.es_initial_radius <= 0 or self.es_min_radius <= 0:
            raise ValueError("search radii must be positive")
        if self.es_growth <= 1.0:
            raise ValueError("growth factor must exceed 1")
        if self.spatial_samples < 2 or self.max_iterations < 1:
            raise ValueError("invalid sampling/iteration counts")


def to_single_channel(img: Image) -> np.ndarray:
    """Collapse a multichannel image to one channel by projection onto the
    first principal component of the channel covariance, then rescale to
    [0, 1]. Single-channel input is rescaled only."""
    px = img.pixels.astype(np.float64)
    if px.shape[0] == 1:
        flat = px[0]
    else:
        c = px.shape[0]
        x = px.reshape(c, -1)
        x = x - x.mean(axis=1, keepdims=True)
        cov = x @ x.T / x.shape[1]
        vals, vecs = np.linalg.eigh(cov)
        pc = vecs[:, -1]
        # deterministic sign: largest-magnitude loading is positive
        if pc[np.argmax(np.abs(pc))] < 0:
            pc = -pc
        flat = (pc @ x).reshape(px.shape[1:])
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        return np.zeros_like(flat)
    return (flat - lo) / (hi - lo)


def _cubic_bspline(u: np.ndarray) -> np.ndarray:
    au = np.abs(u)
    out = np.zeros_like(au)
    inner = au < 1.0
    outer = (au >= 1.0) & (au < 2.0)
    out[inner] = (4.0 - 6.0 * au[inner] ** 2 + 3.0 * au[inner] ** 3) / 6.0
    out[outer] = (2.0 - au[outer]) ** 3 / 6.0
    return out


def _sample_positions(shape: tuple[int, int], count: int, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    total = h * w
    count = min(count, total)
    flat = rng.choice(total, size=count, replace=False)
    ys, xs = np.divmod(flat, w)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def _mi_from_values(ref_vals, flt_vals, bins: int) -> float:
    """MI of a joint histogram: hard binning on the reference axis, cubic
    B-spline window on the floating axis."""
    r_lo, r_hi = 0.0, 1.0
    ref_idx = np.clip((ref_vals - r_lo) / (r_hi - r_lo) * bins, 0, bins - 1e-9).astype(np.int64)
    pos = np.clip((flt_vals - r_lo) / (r_hi - r_lo) * bins - 0.5, 0.0, bins - 1.0)
    base = np.floor(pos).astype(np.int64)
    joint = np.zeros((bins, bins), dtype=np.float64)
    for off in (-1, 0, 1, 2):
        b = np.clip(base + off, 0, bins - 1)
        wgt = _cubic_bspline(pos - (base + off))
        np.add.at(joint, (ref_idx, b), wgt)
    total = joint.sum()
    if total <= 0:
        return 0.0
    joint /= total
    p_ref = joint.sum(axis=1)
    p_flt = joint.sum(axis=0)
    nz = joint > 0
    denom = np.outer(p_ref, p_flt)
    return float(np.sum(joint[nz] * np.log(joint[nz] / denom[nz])))


def _interp_linear(arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    coords = np.stack([pts[:, 1], pts[:, 0]])
    return ndimage.map_coordinates(arr, coords, order=1, mode="constant", cval=0.0)


def mattes_mi(
    ref: Image,
    flt: Image,
    t: RigidTransform2D,
    cfg: MIConfig,
    rng: np.random.Generator,
) -> float:
    """MI between the reference and the floating image pulled back through
    ``t``, estimated over ``cfg.spatial_samples`` reference positions.

    Deterministic given the generator state. Raises on empty overlap.
    """
    ref_arr = to_single_channel(ref)
    flt_arr = to_single_channel(flt)
    pts = _sample_positions(ref_arr.shape, cfg.spatial_samples, rng)
    return _mattes_mi_arrays(ref_arr, flt_arr, t, pts, cfg)


def _mattes_mi_arrays(ref_arr, flt_arr, t, pts, cfg: MIConfig) -> float:
    mapped = t.apply(pts)
    h, w = flt_arr.shape
    inside = (
        (mapped[:, 0] >= 0.0)
        & (mapped[:, 0] <= w - 1.0)
        & (mapped[:, 1] >= 0.0)
        & (mapped[:, 1] <= h - 1.0)
    )
    if int(inside.sum()) < cfg.min_overlap_samples:
        raise RegistrationFailure(f"overlap too small: {int(inside.sum())} samples inside the floating image")
    ref_vals = ref_arr[pts[inside, 1].astype(np.int64), pts[inside, 0].astype(np.int64)]
    flt_vals = _interp_linear(flt_arr, mapped[inside])
    return _mi_from_values(ref_vals, flt_vals, cfg.bins)


def register_mi(
    ref: Image,
    flt: Image,
    cfg: MIConfig,
    rng: np.random.Generator,
    init: RigidTransform2D | None = None,
) -> RegistrationResult:
    """(1+1) evolutionary strategy over (angle, tx, ty) maximizing MI.

    Parameters are normalized so a unit step is commensurate across angle
    and translation: the angle coordinate is scaled by the half-diagonal of
    the reference, and the search radius is measured relative to the image
    diagonal. The radius grows by the growth factor on acceptance and shrinks
    by its fourth root on rejection.
    """
    start_time = time.perf_counter()
    ref_arr = to_single_channel(ref)
    flt_arr = to_single_channel(flt)
    h, w = ref_arr.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    if init is None:
        init = RigidTransform2D.identity(center)
    init = init.with_center(center)
    diag = math.hypot(h, w)
    half_diag = diag / 2.0
    pts = _sample_positions(ref_arr.shape, cfg.spatial_samples, rng)

    def params_to_transform(u: np.ndarray) -> RigidTransform2D:
        return RigidTransform2D(angle=u[0] / half_diag, translation=(u[1], u[2]), center=center)

    def objective(u: np.ndarray) -> float:
        return _mattes_mi_arrays(ref_arr, flt_arr, params_to_transform(u), pts, cfg)

    u = np.array([init.angle * half_diag, init.translation[0], init.translation[1]], dtype=np.float64)
    best_mi = objective(u)
    radius = cfg.es_initial_radius * diag
    min_radius = cfg.es_min_radius * diag
    shrink = cfg.es_growth ** (-0.25)
    trace = [best_mi]
    iterations = 0
    while iterations < cfg.max_iterations and radius >= min_radius:
        iterations += 1
        candidate = u + radius * rng.standard_normal(3)
        try:
            mi = objective(candidate)
        except RegistrationFailure:
            mi = -math.inf
        if mi > best_mi:
            u = candidate
            best_mi = mi
            radius *= cfg.es_growth
        else:
            radius *= shrink
        trace.append(best_mi)
    return RegistrationResult(
        transform=params_to_transform(u),
        method="mi",
        final_objective=-best_mi,
        trace=trace,
        runtime_seconds=time.perf_counter() - start_time,
        converged=radius < min_radius,
        message="" if radius < min_radius else "stopped at iteration limit",
    )
