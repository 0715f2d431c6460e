"""Feature-based rigid registration: scale/rotation-invariant keypoints with
descriptors, nearest-descriptor matching with a ratio test, consensus
estimation from a two-point minimal rigid solver, and a constrained
least-squares refit on the inliers.

Keypoint detection and description are delegated to OpenCV's SIFT; the
matcher, minimal solver, consensus loop, and rigid refit are implemented
here.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import cv2
import numpy as np

from ..geometry import RigidTransform2D
from ..image import Image
from . import RegistrationFailure, RegistrationResult


@dataclass
class FeatureConfig:
    descriptor_grid: int = 4  # samples per row/column of the descriptor
    orientation_bins: int = 8
    steps_per_octave: int = 3
    initial_sigma: float = 1.6
    octave_range: tuple[int, int] = (128, 1024)  # informational; detector covers all scales
    ratio_threshold: float = 0.8
    consensus_threshold_px: float = 3.0
    max_iterations: int = 1000
    min_inliers: int = 4
    min_keypoints: int = 8

    def __post_init__(self):
        if self.min_inliers < 2:
            raise ValueError("rigid 2-D estimation needs at least two correspondences")
        if not 0.0 < self.ratio_threshold < 1.0:
            raise ValueError("ratio threshold must be in (0, 1)")
        if self.consensus_threshold_px <= 0:
            raise ValueError("consensus threshold must be positive")
        if self.octave_range[0] > self.octave_range[1]:
            raise ValueError("invalid octave range")


def _to_uint8(img: Image) -> np.ndarray:
    px = img.pixels.astype(np.float64)
    gray = px.mean(axis=0) if px.shape[0] > 1 else px[0]
    lo, hi = float(gray.min()), float(gray.max())
    if hi <= lo:
        raise RegistrationFailure("constant image: no detectable structure")
    return np.clip((gray - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)


def detect_and_describe(img: Image, cfg: FeatureConfig) -> tuple[np.ndarray, np.ndarray]:
    """Keypoint locations (N, 2) as (x, y) and their descriptors (N, D)."""
    sift = cv2.SIFT_create(nOctaveLayers=cfg.steps_per_octave, sigma=cfg.initial_sigma)
    kps, desc = sift.detectAndCompute(_to_uint8(img), None)
    if desc is None or len(kps) == 0:
        return np.zeros((0, 2)), np.zeros((0, 128), dtype=np.float32)
    pts = np.array([kp.pt for kp in kps], dtype=np.float64)
    return pts, desc


def match_descriptors(d1: np.ndarray, d2: np.ndarray, ratio: float) -> np.ndarray:
    """Indices (M, 2) of mutual nearest-descriptor matches passing the
    distance-ratio test against the second-nearest neighbor."""
    if len(d1) == 0 or len(d2) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    a = d1.astype(np.float64)
    b = d2.astype(np.float64)
    out = []
    # chunk rows to bound the distance-matrix memory
    chunk = max(1, int(2e7 / max(1, len(b))))
    bb = (b**2).sum(axis=1)
    for lo in range(0, len(a), chunk):
        sub = a[lo : lo + chunk]
        d2mat = (sub**2).sum(axis=1)[:, None] + bb[None, :] - 2.0 * sub @ b.T
        np.maximum(d2mat, 0.0, out=d2mat)
        idx = np.argpartition(d2mat, 1, axis=1)[:, :2]
        rowr = np.arange(len(sub))
        first = np.where(d2mat[rowr, idx[:, 0]] <= d2mat[rowr, idx[:, 1]], idx[:, 0], idx[:, 1])
        second = np.where(first == idx[:, 0], idx[:, 1], idx[:, 0])
        dn = np.sqrt(d2mat[rowr, first])
        ds = np.sqrt(d2mat[rowr, second])
        ok = dn < ratio * np.maximum(ds, 1e-12)
        for i in np.flatnonzero(ok):
            out.append((lo + i, first[i]))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def rigid_from_correspondences(p: np.ndarray, q: np.ndarray) -> RigidTransform2D:
    """Least-squares rigid transform mapping points ``p`` onto ``q``.

    Exact for two non-coincident pairs related by a rigid motion; for more
    pairs it is the constrained (rotation + translation) least-squares fit.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
        raise ValueError("need matching point sets of shape (n >= 2, 2)")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    dp = p - pc
    dq = q - qc
    if np.allclose(dp, 0.0) or np.allclose(dq, 0.0):
        raise ValueError("coincident points: rotation is undefined")
    # 2-D Procrustes: angle from the cross/dot accumulators
    dot = float((dp * dq).sum())
    cross = float((dp[:, 0] * dq[:, 1] - dp[:, 1] * dq[:, 0]).sum())
    angle = math.atan2(cross, dot)
    c, s = math.cos(angle), math.sin(angle)
    r = np.array([[c, -s], [s, c]])
    t = qc - r @ pc
    return RigidTransform2D(angle=angle, translation=(float(t[0]), float(t[1])), center=(0.0, 0.0))


def ransac_rigid(
    p: np.ndarray,
    q: np.ndarray,
    cfg: FeatureConfig,
    rng: np.random.Generator,
) -> tuple[RigidTransform2D, np.ndarray]:
    """Consensus estimation of the rigid motion p -> q from noisy matches.

    Repeatedly fits the two-point minimal solver on random pairs, scores by
    inliers within the consensus threshold, and refits on the best inlier
    set. Raises :class:`RegistrationFailure` when no model reaches
    ``cfg.min_inliers``.
    """
    n = len(p)
    if n < 2:
        raise RegistrationFailure(f"need at least 2 correspondences, got {n}")
    best_mask = None
    best_count = 0
    best_rmse = math.inf
    for _ in range(cfg.max_iterations):
        i, j = rng.choice(n, size=2, replace=False)
        if np.allclose(p[i], p[j]) or np.allclose(q[i], q[j]):
            continue
        try:
            model = rigid_from_correspondences(p[[i, j]], q[[i, j]])
        except ValueError:
            continue
        residuals = np.linalg.norm(model.apply(p) - q, axis=1)
        mask = residuals < cfg.consensus_threshold_px
        count = int(mask.sum())
        if count < 2:
            continue
        rmse = float(np.sqrt((residuals[mask] ** 2).mean()))
        if count > best_count or (count == best_count and rmse < best_rmse):
            best_count = count
            best_mask = mask
            best_rmse = rmse
    if best_mask is None or best_count < cfg.min_inliers:
        raise RegistrationFailure(
            f"consensus failed: best model has {best_count} inliers (< {cfg.min_inliers})"
        )
    refined = rigid_from_correspondences(p[best_mask], q[best_mask])
    residuals = np.linalg.norm(refined.apply(p) - q, axis=1)
    final_mask = residuals < cfg.consensus_threshold_px
    if int(final_mask.sum()) >= cfg.min_inliers:
        refined = rigid_from_correspondences(p[final_mask], q[final_mask])
        best_mask = final_mask
    return refined, best_mask


def register_features(
    ref: Image,
    flt: Image,
    cfg: FeatureConfig,
    rng: np.random.Generator,
    init: RigidTransform2D | None = None,
) -> RegistrationResult:
    """Estimate the reference-to-floating rigid transform from keypoint
    correspondences. The ``init`` argument is accepted for interface parity
    and ignored: the method is global.

    Returns a failed result (``transform=None``) when keypoints, matches, or
    consensus inliers are insufficient.
    """
    start_time = time.perf_counter()

    def failure(msg: str) -> RegistrationResult:
        return RegistrationResult(
            transform=None,
            method="feature",
            final_objective=math.inf,
            runtime_seconds=time.perf_counter() - start_time,
            converged=False,
            message=msg,
        )

    pts_ref, desc_ref = detect_and_describe(ref, cfg)
    pts_flt, desc_flt = detect_and_describe(flt, cfg)
    if len(pts_ref) < cfg.min_keypoints or len(pts_flt) < cfg.min_keypoints:
        return failure(f"too few keypoints: {len(pts_ref)} / {len(pts_flt)} (need {cfg.min_keypoints})")
    matches = match_descriptors(desc_ref, desc_flt, cfg.ratio_threshold)
    if len(matches) < cfg.min_inliers:
        return failure(f"too few matches after ratio test: {len(matches)}")
    p = pts_ref[matches[:, 0]]
    q = pts_flt[matches[:, 1]]
    try:
        transform, inliers = ransac_rigid(p, q, cfg, rng)
    except RegistrationFailure as exc:
        return failure(str(exc))
    residuals = np.linalg.norm(transform.apply(p[inliers]) - q[inliers], axis=1)
    return RegistrationResult(
        transform=transform.with_center(ref.spatial_center),
        method="feature",
        final_objective=float(residuals.mean()),
        trace=[float(residuals.mean())],
        runtime_seconds=time.perf_counter() - start_time,
        converged=True,
        message=f"{int(inliers.sum())}/{len(p)} inliers",
    )
