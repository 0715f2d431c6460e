"""Contrastive shared representations for multimodal rigid image registration.

The package trains one image-to-image encoder per modality with a
contrastive objective (with an optional quarter-turn equivariance
constraint), then registers the resulting representation maps with
intensity-, mutual-information-, or feature-based rigid backends, and ships
the evaluation protocol used to compare them.
"""

__version__ = "0.1.0"

from .geometry import RigidTransform2D
from .image import Image, load_image, rotate_c4, save_image, warp

__all__ = [
    "__version__",
    "Image",
    "RigidTransform2D",
    "load_image",
    "save_image",
    "rotate_c4",
    "warp",
]
