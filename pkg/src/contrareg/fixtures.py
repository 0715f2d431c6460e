"""Deterministic synthetic data: smooth structured images, two-modality
datasets written to disk, and monomodal registration pairs with known
ground-truth transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .evaluation import EvalTransform, generate_eval_transforms
from .geometry import RigidTransform2D
from .image import Image, central_crop, save_image, warp


def blob_image(
    size: int,
    seed: int,
    n_blobs: int = 40,
    spot_density: float = 0.004,
    fine_noise: float = 0.15,
) -> np.ndarray:
    """Structured [0, 1] test pattern: anisotropic Gaussian blobs over a
    gentle gradient, small high-contrast spots (keypoint targets), and a
    little fine-grained texture. Suitable for keypoint detection, histogram
    statistics, and contrastive patch training alike."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    img = 0.1 * (xs + ys) / (2 * size)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, 2)
        sx, sy = rng.uniform(size / 60, size / 12, 2)
        theta = rng.uniform(0, math.pi)
        amp = rng.uniform(0.3, 1.0) * rng.choice([-1.0, 1.0])
        dx = xs - cx
        dy = ys - cy
        rx = dx * math.cos(theta) + dy * math.sin(theta)
        ry = -dx * math.sin(theta) + dy * math.cos(theta)
        img += amp * np.exp(-0.5 * ((rx / sx) ** 2 + (ry / sy) ** 2))
    n_spots = int(spot_density * size * size)
    if n_spots:
        pos = rng.uniform(0, size, (n_spots, 2))
        amps = rng.uniform(0.5, 1.5, n_spots) * rng.choice([-1.0, 1.0], n_spots)
        sigmas = rng.uniform(1.2, 3.0, n_spots)
        for (cx, cy), amp, sg in zip(pos, amps, sigmas):
            x0, x1 = max(0, int(cx - 4 * sg)), min(size, int(cx + 4 * sg) + 1)
            y0, y1 = max(0, int(cy - 4 * sg)), min(size, int(cy + 4 * sg) + 1)
            img[y0:y1, x0:x1] += amp * np.exp(
                -0.5 * (((xs[y0:y1, x0:x1] - cx) / sg) ** 2 + ((ys[y0:y1, x0:x1] - cy) / sg) ** 2)
            )
    if fine_noise > 0:
        img += fine_noise * gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.0)
    lo, hi = img.min(), img.max()
    return ((img - lo) / (hi - lo)).astype(np.float32)


def two_modality_pair(size: int, seed: int, noise: float = 0.03) -> tuple[Image, Image]:
    """Aligned pair: modality 'a' is a structured image, modality 'b' is its
    intensity inversion with additive noise."""
    base = blob_image(size, seed)
    rng = np.random.default_rng(seed + 1)
    inverted = np.clip(1.0 - base + rng.normal(0.0, noise, base.shape), 0.0, 1.0).astype(np.float32)
    return (
        Image(base[None], modality="a", value_range=(0.0, 1.0)),
        Image(inverted[None], modality="b", value_range=(0.0, 1.0)),
    )


def write_two_modality_dataset(
    directory,
    n_train: int = 1,
    n_test: int = 1,
    size: int = 360,
    seed: int = 0,
    noise: float = 0.03,
) -> Path:
    """Write a paired-file synthetic dataset and its descriptor; returns the
    descriptor path."""
    directory = Path(directory)
    (directory / "a").mkdir(parents=True, exist_ok=True)
    (directory / "b").mkdir(parents=True, exist_ok=True)
    train_ids = [f"train{i:02d}" for i in range(n_train)]
    test_ids = [f"test{i:02d}" for i in range(n_test)]
    for i, stem in enumerate(train_ids + test_ids):
        img_a, img_b = two_modality_pair(size, seed + 1000 * i, noise)
        save_image(img_a, directory / "a" / f"{stem}.tif")
        save_image(img_b, directory / "b" / f"{stem}.tif")
    descriptor = {
        "modalities": [
            {"name": "a", "glob": "a/*.tif"},
            {"name": "b", "glob": "b/*.tif"},
        ],
        "splits": {"train": train_ids, "test": test_ids},
    }
    path = directory / "dataset.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(descriptor, f, sort_keys=True)
    return path


@dataclass
class SyntheticPair:
    """A registration problem with known ground truth.

    ``true_transform`` maps reference coordinates to floating coordinates;
    both images were cropped from a larger source so neither contains fill
    pixels.
    """

    reference: Image
    floating: Image
    true_transform: RigidTransform2D
    displacement: float
    stratum: str


def make_registration_pair(
    source: Image,
    eval_transform: EvalTransform,
    out_size: int,
    interpolation: str = "linear",
    floating_source: Image | None = None,
) -> SyntheticPair:
    """Build (reference, floating) crops of ``source`` related by the given
    transform. ``floating_source`` substitutes a different (aligned) source
    for the floating side, which turns the pair multimodal."""
    t = eval_transform.transform
    big = source.height
    if big < out_size:
        raise ValueError("source must be at least as large as the output")
    offset = (big - out_size) / 2.0
    shift = RigidTransform2D(translation=(offset, offset))
    ref = central_crop(source, (out_size, out_size))
    # floating(q) = source(t^{-1}(q) + offset): floating(t(p)) == reference(p)
    flt_map = shift.compose(t.inverse())
    flt_src = floating_source if floating_source is not None else source
    result = warp(flt_src, flt_map, interpolation=interpolation, out_size=(out_size, out_size))
    if not result.support.all():
        raise ValueError(
            f"floating footprint leaves the source (oob fraction {result.oob_fraction:.4f}); "
            "use a larger source image"
        )
    return SyntheticPair(
        reference=ref,
        floating=result.image,
        true_transform=t,
        displacement=eval_transform.displacement,
        stratum=eval_transform.stratum,
    )


def make_monomodal_set(
    n_pairs: int,
    out_size: int,
    seed: int,
    rotation_deg: float = 30.0,
    translation_px: float = 100.0,
    strata_bounds: tuple[float, float] = (100.0, 200.0),
    strata_counts: dict[str, int] | None = None,
    margin_factor: float = 2.0,
) -> list[SyntheticPair]:
    """Seeded monomodal registration problems with stratified transforms."""
    rng = np.random.default_rng(seed)
    if strata_counts is None:
        base = n_pairs // 3
        strata_counts = {"small": n_pairs - 2 * base, "medium": base, "large": base}
    transforms = generate_eval_transforms(
        strata_counts,
        (out_size, out_size),
        rng,
        rotation_deg=rotation_deg,
        translation_px=translation_px,
        strata_bounds=strata_bounds,
    )
    big = int(math.ceil(out_size * margin_factor))
    pairs = []
    for i, et in enumerate(transforms):
        source = Image(blob_image(big, seed + 7919 * (i + 1))[None], modality="mono")
        pairs.append(make_registration_pair(source, et, out_size))
    return pairs
