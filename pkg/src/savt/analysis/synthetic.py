"""Seeded desk-scale scenes: one textured rectangular object on a textured background.

Boxes are aligned to the patch grid so the patch-level mask is exactly the set
of patches whose centers fall inside the box. Depth is a vertical ramp for the
background and a constant nearer plane for the object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Rng
from .pib import BoxAnnotation

# per-class base colours, class 0 is background
_PALETTE = np.array([
    [0.45, 0.50, 0.55],
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.30, 0.90],
    [0.85, 0.80, 0.10],
])


@dataclass
class SyntheticSet:
    images: np.ndarray       # N x S x S x 3, already normalized
    boxes: list[BoxAnnotation]
    masks: np.ndarray        # N x g x g int class per patch (0 = background)
    depth: np.ndarray        # N x g x g positive depth per patch
    labels: np.ndarray       # N object class in 1..n_classes
    patch_size: int

    @property
    def ids(self) -> list[str]:
        return [b.image_id for b in self.boxes]

    def __len__(self) -> int:
        return len(self.images)


def make_scenes(n: int, image_size: int, patch_size: int, seed: int = 0,
                n_classes: int = 2) -> SyntheticSet:
    if image_size % patch_size:
        raise ValueError("image_size must be a multiple of patch_size")
    if not 1 <= n_classes < len(_PALETTE):
        raise ValueError(f"n_classes must be in 1..{len(_PALETTE) - 1}")
    rng = Rng(seed)
    g = image_size // patch_size
    yy, xx = np.mgrid[0:image_size, 0:image_size]

    images = np.empty((n, image_size, image_size, 3))
    masks = np.zeros((n, g, g), dtype=np.int64)
    depth = np.empty((n, g, g))
    labels = np.empty(n, dtype=np.int64)
    boxes = []
    ramp = 8.0 - 4.0 * (np.arange(g) + 0.5) / g
    for i in range(n):
        cls = int(rng.integers(1, n_classes + 1))
        h = int(rng.integers(1, g))
        w = int(rng.integers(1, g))
        r0 = int(rng.integers(0, g - h + 1))
        c0 = int(rng.integers(0, g - w + 1))
        obj_depth = float(rng.uniform((), 1.5, 3.5))
        freq = float(rng.uniform((), 0.3, 0.9))

        img = _PALETTE[0] + 0.05 * rng.normal((image_size, image_size, 3))
        stripes = 0.15 * np.sin(freq * (xx + yy) + cls)[..., None]
        y0, y1 = r0 * patch_size, (r0 + h) * patch_size
        x0, x1 = c0 * patch_size, (c0 + w) * patch_size
        img[y0:y1, x0:x1] = _PALETTE[cls] + stripes[y0:y1, x0:x1]
        images[i] = (img - 0.5) / 0.25

        masks[i, r0:r0 + h, c0:c0 + w] = cls
        depth[i] = ramp[:, None]
        depth[i, r0:r0 + h, c0:c0 + w] = obj_depth
        labels[i] = cls
        boxes.append(BoxAnnotation(f"img{i:05d}", (x0, y0, x1, y1), image_size, image_size))
    return SyntheticSet(images, boxes, masks, depth, labels, patch_size)
