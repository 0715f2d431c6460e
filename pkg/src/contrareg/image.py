"""Image container, exact quarter-turn rotations, interpolated warps, and I/O.

Images are stored channel-first (C, H, W) as floats. Loading normalizes
integer data into the declared value range; all later operations keep the
float representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import RigidTransform2D, validate_c4

INTERPOLATION_ORDERS = {"nearest": 0, "linear": 1, "cubic": 3}


@dataclass
class Image:
    """Multichannel 2-D raster with a modality tag.

    ``pixels`` has shape (channels, height, width). ``value_range`` is the
    closed interval the data was normalized into at load time; warps and
    augmentations may locally overshoot it (cubic interpolation), which is
    tolerated.
    """

    pixels: np.ndarray
    modality: str = ""
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3:
            raise ValueError(f"pixels must be (C, H, W) or (H, W), got shape {px.shape}")
        if min(px.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        lo, hi = self.value_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid value range {self.value_range}")
        object.__setattr__(self, "pixels", px)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def spatial_center(self) -> tuple[float, float]:
        """Default rotation pivot: ((w-1)/2, (h-1)/2) in (x, y)."""
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return replace(self, pixels=pixels)

    def is_square(self) -> bool:
        return self.height == self.width


def as_image(array, modality: str = "", value_range=(0.0, 1.0)) -> Image:
    """Wrap a 2-D or (C, H, W) array in an :class:`Image`."""
    return Image(np.asarray(array), modality=modality, value_range=value_range)


def rotate_c4(img: Image, k: int) -> Image:
    """Rotate by k quarter turns as an exact pixel permutation.

    Equals ``warp`` with angle k*pi/2 about the image center on square
    inputs, but involves no interpolation. Non-square inputs are allowed;
    odd k swaps the spatial dimensions.
    """
    k = validate_c4(k)
    if k == 0:
        return img.with_pixels(img.pixels.copy())
    return img.with_pixels(np.ascontiguousarray(np.rot90(img.pixels, k, axes=(-2, -1))))


@dataclass
class WarpResult:
    """Resampled image plus the mask of output pixels whose sample position
    fell inside the source support."""

    image: Image
    support: np.ndarray = field(repr=False)

    @property
    def oob_fraction(self) -> float:
        return float(1.0 - self.support.mean())


def warp(
    img: Image,
    transform: RigidTransform2D,
    interpolation: str = "linear",
    out_size: tuple[int, int] | None = None,
    fill: float = 0.0,
) -> WarpResult:
    """Resample ``img`` through ``transform``.

    Pull-back convention: output pixel p takes the value of the source at
    ``transform.apply(p)``. Out-of-support samples are filled with ``fill``
    and reported through the support mask.
    """
    if interpolation not in INTERPOLATION_ORDERS:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    order = INTERPOLATION_ORDERS[interpolation]
    h, w = out_size if out_size is not None else (img.height, img.width)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    src = transform.apply(pts)
    sx = src[:, 0].reshape(h, w)
    sy = src[:, 1].reshape(h, w)
    support = (sx >= 0.0) & (sx <= img.width - 1.0) & (sy >= 0.0) & (sy <= img.height - 1.0)
    coords = np.stack([sy, sx])
    out = np.empty((img.channels, h, w), dtype=np.float64)
    for c in range(img.channels):
        out[c] = ndimage.map_coordinates(
            img.pixels[c].astype(np.float64),
            coords,
            order=order,
            mode="constant",
            cval=fill,
            prefilter=(order > 1),
        )
    out[:, ~support] = fill
    out = out.astype(img.pixels.dtype, copy=False)
    return WarpResult(image=img.with_pixels(out), support=support)


def central_crop(img: Image, size: tuple[int, int]) -> Image:
    """Crop a centered (h, w) window; window must fit inside the image."""
    h, w = size
    if h > img.height or w > img.width:
        raise ValueError(f"crop {size} exceeds image {img.height}x{img.width}")
    top = (img.height - h) // 2
    left = (img.width - w) // 2
    return img.with_pixels(img.pixels[:, top : top + h, left : left + w].copy())


# ---------------------------------------------------------------------------
# I/O


def _normalize_loaded(arr: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    lo, hi = value_range
    if np.issubdtype(arr.dtype, np.integer):
        scale = float(np.iinfo(arr.dtype).max)
        out = arr.astype(np.float32) / scale
    else:
        out = arr.astype(np.float32)
    return (out * (hi - lo) + lo).astype(np.float32)


def load_image(path, modality: str = "", value_range=(0.0, 1.0)) -> Image:
    """Load an 8/16-bit or float PNG/TIFF as a channel-first float image.

    Integer data is scaled into ``value_range``; stored channel order is
    preserved.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(str(path))
    elif suffix == ".png":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            arr = np.asarray(im)
    else:
        raise ValueError(f"unsupported image format {suffix!r} for {path}")
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3:
        # trailing small axis is channels (H, W, C); otherwise channel-first
        if arr.shape[-1] <= 8 and arr.shape[-1] <= arr.shape[0]:
            arr = np.moveaxis(arr, -1, 0)
    else:
        raise ValueError(f"cannot interpret {arr.shape} as a 2-D image: {path}")
    arr = _normalize_loaded(arr, value_range)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite pixel values in {path}")
    return Image(arr, modality=modality, value_range=value_range)


def save_image(img: Image, path) -> None:
    """Write an image. TIFF keeps float32 data; PNG quantizes to 8-bit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    px = img.pixels
    if suffix in (".tif", ".tiff"):
        import tifffile

        if px.shape[0] == 1:
            tifffile.imwrite(str(path), px[0].astype(np.float32))
        elif px.shape[0] == 3:
            tifffile.imwrite(str(path), np.moveaxis(px, 0, -1).astype(np.float32), photometric="rgb")
        else:
            tifffile.imwrite(str(path), px.astype(np.float32), photometric="minisblack")
    elif suffix == ".png":
        from PIL import Image as PILImage

        if np.issubdtype(px.dtype, np.integer):
            data = px.astype(np.uint8)
        else:
            lo, hi = img.value_range
            data = np.clip((px - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
        data = data[0] if data.shape[0] == 1 else np.moveaxis(data, 0, -1)
        PILImage.fromarray(data).save(path)
    else:
        raise ValueError(f"unsupported image format {suffix!r} for {path}")
