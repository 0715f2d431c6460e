"""Dataset ingestion, modality preprocessing, and aligned patch sampling.

A dataset is described by a YAML descriptor. Two layouts are supported:

* paired files: each modality declares a ``glob``; files pair up by stem.
* channel split: a single ``source_glob`` names multichannel files and each
  modality declares the ``channels`` it takes from them.

Patch sampling draws aligned tuples at random positions and orientations,
rejecting placements whose rotated footprint would leave the source image,
so no fill pixels ever enter a training patch.
"""

from __future__ import annotations

import fnmatch
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from .geometry import RigidTransform2D
from .image import INTERPOLATION_ORDERS, Image, load_image, warp


class DatasetError(ValueError):
    """Raised for malformed dataset layouts or unreadable samples."""


class PatchFootprintError(ValueError):
    """Raised when a rotated patch footprint leaves the source image."""


@dataclass
class MultimodalSample:
    """Pixel-aligned images of one scene, one per modality."""

    images: list[Image]
    sample_id: str

    def __post_init__(self):
        if len(self.images) < 2:
            raise DatasetError(f"sample {self.sample_id!r} needs >= 2 modalities")
        dims = {(im.height, im.width) for im in self.images}
        if len(dims) != 1:
            raise DatasetError(f"sample {self.sample_id!r} has mismatched dimensions {sorted(dims)}")


@dataclass
class PatchTuple:
    """Aligned patches extracted at one location/orientation in every modality."""

    patches: list[Image]
    source_id: str
    center: tuple[float, float]
    orientation: float
    interpolation: str = "linear"


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    validation: list[str] = field(default_factory=list)
    tuning: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def validate_against(self, sample_ids: list[str]) -> None:
        groups = {
            "train": set(self.train),
            "validation": set(self.validation),
            "tuning": set(self.tuning),
            "test": set(self.test),
        }
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                overlap = groups[a] & groups[b]
                if overlap:
                    raise DatasetError(f"splits {a!r} and {b!r} overlap: {sorted(overlap)}")
        declared = set().union(*groups.values())
        ids = set(sample_ids)
        missing = ids - declared
        if declared and missing:
            raise DatasetError(f"samples missing from splits: {sorted(missing)}")
        unknown = declared - ids
        if unknown:
            raise DatasetError(f"splits reference unknown samples: {sorted(unknown)}")


@dataclass
class ModalitySpec:
    name: str
    glob: str | None = None
    channels: list[int] | None = None
    shg_log: bool = False


@dataclass
class DatasetLayout:
    """Parsed dataset descriptor."""

    modalities: list[ModalitySpec]
    source_glob: str | None = None
    splits: DatasetSplit | None = None

    @staticmethod
    def from_dict(raw: dict) -> "DatasetLayout":
        allowed = {"modalities", "source_glob", "splits"}
        unknown = set(raw) - allowed
        if unknown:
            raise DatasetError(f"unknown descriptor keys: {sorted(unknown)}")
        mods_raw = raw.get("modalities")
        if not mods_raw or len(mods_raw) < 2:
            raise DatasetError("descriptor must declare at least two modalities")
        source_glob = raw.get("source_glob")
        mods = []
        for m in mods_raw:
            extra = set(m) - {"name", "glob", "channels", "shg_log"}
            if extra:
                raise DatasetError(f"unknown modality keys: {sorted(extra)}")
            spec = ModalitySpec(
                name=str(m["name"]),
                glob=m.get("glob"),
                channels=list(m["channels"]) if "channels" in m else None,
                shg_log=bool(m.get("shg_log", False)),
            )
            if source_glob is None and spec.glob is None:
                raise DatasetError(f"modality {spec.name!r} needs a glob (paired-file layout)")
            if source_glob is not None and spec.channels is None:
                raise DatasetError(f"modality {spec.name!r} needs channels (channel-split layout)")
            mods.append(spec)
        splits = None
        if "splits" in raw:
            s = raw["splits"] or {}
            extra = set(s) - {"train", "validation", "tuning", "test"}
            if extra:
                raise DatasetError(f"unknown split keys: {sorted(extra)}")
            splits = DatasetSplit(
                train=[str(x) for x in s.get("train", [])],
                validation=[str(x) for x in s.get("validation", [])],
                tuning=[str(x) for x in s.get("tuning", [])],
                test=[str(x) for x in s.get("test", [])],
            )
        return DatasetLayout(modalities=mods, source_glob=source_glob, splits=splits)

    @staticmethod
    def from_yaml(path) -> "DatasetLayout":
        with open(path) as f:
            raw = yaml.safe_load(f)
        if not isinstance(raw, dict):
            raise DatasetError(f"descriptor {path} is not a mapping")
        return DatasetLayout.from_dict(raw)


def preprocess_shg(img: Image) -> Image:
    """Pixelwise log(1 + x) for x in [0, 1]; output spans [0, log 2]."""
    px = img.pixels
    if px.min() < 0.0 or px.max() > 1.0:
        raise ValueError(f"values outside [0, 1]: [{px.min():.4g}, {px.max():.4g}]")
    return Image(np.log1p(px), modality=img.modality, value_range=(0.0, math.log(2.0)))


def _apply_preprocess(img: Image, spec: ModalitySpec) -> Image:
    return preprocess_shg(img) if spec.shg_log else img


def load_dataset(root_path, layout: DatasetLayout) -> list[MultimodalSample]:
    """Load every sample under ``root_path`` following the layout.

    Returns samples ordered by sample id. Raises :class:`DatasetError` for
    missing counterparts, dimension mismatches, or unreadable files.
    """
    root = Path(root_path)
    if layout.source_glob is not None:
        samples = _load_channel_split(root, layout)
    else:
        samples = _load_paired_files(root, layout)
    if not samples:
        warnings.warn(f"no samples found under {root}", stacklevel=2)
    if layout.splits is not None:
        layout.splits.validate_against([s.sample_id for s in samples])
    return samples


def _load_channel_split(root: Path, layout: DatasetLayout) -> list[MultimodalSample]:
    files = sorted(root.glob(layout.source_glob))
    samples = []
    for path in files:
        full = load_image(path)
        images = []
        for spec in layout.modalities:
            bad = [c for c in spec.channels if c < 0 or c >= full.channels]
            if bad:
                raise DatasetError(f"{path.name}: channel indices {bad} out of range (file has {full.channels})")
            px = full.pixels[spec.channels]
            images.append(_apply_preprocess(Image(px, modality=spec.name, value_range=full.value_range), spec))
        samples.append(MultimodalSample(images=images, sample_id=path.stem))
    return sorted(samples, key=lambda s: s.sample_id)


def _load_paired_files(root: Path, layout: DatasetLayout) -> list[MultimodalSample]:
    per_modality: list[dict[str, Path]] = []
    for spec in layout.modalities:
        found = {p.stem: p for p in sorted(root.glob(spec.glob))}
        per_modality.append(found)
    stems = sorted(set().union(*[set(d) for d in per_modality])) if per_modality else []
    samples = []
    for stem in stems:
        paths = []
        for spec, found in zip(layout.modalities, per_modality):
            if stem not in found:
                raise DatasetError(f"sample {stem!r}: missing counterpart for modality {spec.name!r}")
            paths.append(found[stem])
        images = []
        for spec, path in zip(layout.modalities, paths):
            try:
                img = load_image(path, modality=spec.name)
            except Exception as exc:
                raise DatasetError(f"sample {stem!r}: cannot read {path}: {exc}") from exc
            images.append(_apply_preprocess(img, spec))
        dims = {(im.height, im.width) for im in images}
        if len(dims) != 1:
            raise DatasetError(f"sample {stem!r}: modality dimensions differ: {sorted(dims)}")
        samples.append(MultimodalSample(images=images, sample_id=stem))
    return samples


# ---------------------------------------------------------------------------
# Patch extraction and augmentation


@dataclass
class AugmentationConfig:
    """Augmentation menu applied to sampled patch tuples.

    Geometric parts (orientation, flips, interpolation choice) use one draw
    shared by all modalities of a tuple so alignment survives; photometric
    parts are drawn independently per modality.
    """

    flip_prob: float = 0.5
    rotation_range: float = math.pi  # orientation drawn in [-range, +range]
    integer_degrees: bool = False
    interpolation_choices: tuple[str, ...] = ("linear", "nearest", "cubic")
    photometric_prob: float = 0.2  # probability of drawing one photometric op
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    blur_sigma: float = 0.1
    dropout_rate: float = 0.1
    dropout_superpixel_fraction: float = 0.05
    channel_gain_prob: float = 0.3
    channel_gain_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("flip_prob", "photometric_prob", "channel_gain_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be >= 0")
        for interp in self.interpolation_choices:
            if interp not in INTERPOLATION_ORDERS:
                raise ValueError(f"unknown interpolation {interp!r}")
        if not self.interpolation_choices:
            raise ValueError("interpolation_choices must be non-empty")

    @staticmethod
    def none() -> "AugmentationConfig":
        """Raw aligned crops: no flips, no rotation, no photometric ops."""
        return AugmentationConfig(
            flip_prob=0.0,
            rotation_range=0.0,
            interpolation_choices=("nearest",),
            photometric_prob=0.0,
            channel_gain_prob=0.0,
        )


_CUBIC_MARGIN = 2.0


def extract_patch(
    img: Image,
    center: tuple[float, float],
    angle: float,
    size: tuple[int, int],
    interpolation: str = "linear",
) -> Image:
    """Cut an (h, w) patch centered at ``center`` rotated by ``angle``.

    The rotated footprint must lie fully inside the source; otherwise
    :class:`PatchFootprintError` is raised and the caller resamples.
    """
    h, w = size
    pc = ((w - 1) / 2.0, (h - 1) / 2.0)
    transform = RigidTransform2D(
        angle=angle,
        translation=(center[0] - pc[0], center[1] - pc[1]),
        center=pc,
    )
    margin = _CUBIC_MARGIN if interpolation == "cubic" else 0.0
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    mapped = transform.apply(corners)
    if (
        mapped[:, 0].min() < margin
        or mapped[:, 1].min() < margin
        or mapped[:, 0].max() > img.width - 1 - margin
        or mapped[:, 1].max() > img.height - 1 - margin
    ):
        raise PatchFootprintError(
            f"patch footprint at center={tuple(center)}, angle={angle:.4f} exceeds "
            f"{img.width}x{img.height} source"
        )
    result = warp(img, transform, interpolation=interpolation, out_size=(h, w))
    if not result.support.all():
        raise PatchFootprintError("warp reported out-of-support pixels despite footprint check")
    return result.image


def _edge_image(px: np.ndarray) -> np.ndarray:
    """Gradient magnitude by central differences, per channel."""
    gy, gx = np.gradient(px, axis=(1, 2))
    return np.hypot(gx, gy)


def _coarse_dropout(px: np.ndarray, rate: float, superpixel: int, rng: np.random.Generator) -> np.ndarray:
    c, h, w = px.shape
    gh = max(1, math.ceil(h / superpixel))
    gw = max(1, math.ceil(w / superpixel))
    keep = rng.random((c, gh, gw)) >= rate
    mask = np.repeat(np.repeat(keep, superpixel, axis=1), superpixel, axis=2)[:, :h, :w]
    return px * mask


def _apply_photometric(img: Image, aug: AugmentationConfig, rng: np.random.Generator) -> Image:
    lo, hi = img.value_range
    px = img.pixels.astype(np.float32)
    if rng.random() < aug.photometric_prob:
        op = rng.integers(4)
        if op == 0:
            sigma = rng.uniform(*aug.noise_sigma_range)
            px = px + rng.normal(0.0, sigma, size=px.shape).astype(np.float32)
        elif op == 1:
            px = np.stack([ndimage.gaussian_filter(ch, aug.blur_sigma) for ch in px])
        elif op == 2:
            superpixel = max(1, round(aug.dropout_superpixel_fraction * min(img.height, img.width)))
            px = _coarse_dropout(px, aug.dropout_rate, superpixel, rng)
        else:
            px = _edge_image(px)
    gains = np.where(
        rng.random(img.channels) < aug.channel_gain_prob,
        rng.uniform(*aug.channel_gain_range, size=img.channels),
        1.0,
    )
    px = px * gains[:, None, None].astype(np.float32)
    return img.with_pixels(np.clip(px, lo, hi))


def sample_batch(
    samples: list[MultimodalSample],
    n: int,
    patch_size: tuple[int, int],
    aug: AugmentationConfig,
    rng_seed: int,
    max_retries: int = 100,
) -> list[PatchTuple]:
    """Draw ``n`` aligned patch tuples at random positions and orientations.

    Deterministic given the seed. Placements whose rotated footprint leaves
    the source are rejected and redrawn, up to ``max_retries`` per tuple.
    """
    if n < 2:
        raise ValueError(f"batch size must be >= 2 (the loss needs negatives), got {n}")
    if not samples:
        raise ValueError("no samples to draw from")
    rng = np.random.default_rng(rng_seed)
    h, w = patch_size
    out: list[PatchTuple] = []
    for _ in range(n):
        placed = None
        for _attempt in range(max_retries):
            sample = samples[int(rng.integers(len(samples)))]
            if aug.rotation_range == 0.0:
                angle = 0.0
            elif aug.integer_degrees:
                deg_range = int(round(math.degrees(aug.rotation_range)))
                angle = math.radians(int(rng.integers(-deg_range, deg_range + 1)))
            else:
                angle = float(rng.uniform(-aug.rotation_range, aug.rotation_range))
            src = sample.images[0]
            cx = float(rng.uniform(0, src.width - 1))
            cy = float(rng.uniform(0, src.height - 1))
            interp = aug.interpolation_choices[int(rng.integers(len(aug.interpolation_choices)))]
            try:
                patches = [extract_patch(im, (cx, cy), angle, (h, w), interp) for im in sample.images]
            except PatchFootprintError:
                continue
            placed = (sample, patches, (cx, cy), angle, interp)
            break
        if placed is None:
            raise PatchFootprintError(
                f"no valid {h}x{w} placement found after {max_retries} retries; sources too small"
            )
        sample, patches, center, angle, interp = placed
        flip_lr = rng.random() < aug.flip_prob
        flip_ud = rng.random() < aug.flip_prob
        if flip_lr:
            patches = [p.with_pixels(p.pixels[:, :, ::-1].copy()) for p in patches]
        if flip_ud:
            patches = [p.with_pixels(p.pixels[:, ::-1, :].copy()) for p in patches]
        patches = [_apply_photometric(p, aug, rng) for p in patches]
        out.append(
            PatchTuple(
                patches=patches,
                source_id=sample.sample_id,
                center=center,
                orientation=angle,
                interpolation=interp,
            )
        )
    return out


def batch_seed(root_seed: int, batch_index: int) -> int:
    """Declared seed-splitting rule for concurrent batch production."""
    return int(root_seed) + int(batch_index)


def match_modality(layout: DatasetLayout, name: str) -> ModalitySpec:
    for spec in layout.modalities:
        if spec.name == name:
            return spec
    raise DatasetError(f"unknown modality {name!r}; declared: {[m.name for m in layout.modalities]}")


def files_for_modality(directory, spec: ModalitySpec) -> list[Path]:
    """Files under ``directory`` matching a paired-file modality glob."""
    directory = Path(directory)
    if spec.glob is None:
        pattern = "*"
    else:
        pattern = spec.glob
    return sorted(p for p in directory.rglob("*") if p.is_file() and fnmatch.fnmatch(str(p.relative_to(directory)), pattern))
