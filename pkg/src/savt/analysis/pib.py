"""Point-in-box (PiB) and CLS-to-patch cosine similarity maps.

PiB at a layer is the fraction of images whose patch with the highest cosine
similarity to the CLS token lies inside the image's foreground box. "Inside"
means the patch's pixel-rectangle center satisfies x0 <= cx < x1 and
y0 <= cy < y1 (boxes are half-open). Argmax ties go to the lowest flat patch
index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..numerics import cosine_similarity
from ..vit import LayerFeatures

__all__ = ["BoxAnnotation", "PibReport", "MissingAnnotationError", "pib", "cls_patch_similarity",
           "patch_center"]


class MissingAnnotationError(KeyError):
    pass


@dataclass(frozen=True)
class BoxAnnotation:
    image_id: str
    box: tuple[float, float, float, float]   # x0, y0, x1, y1 in pixels, half-open
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"box {self.box} for {self.image_id!r} has no area")
        if x0 < 0 or y0 < 0:
            raise ValueError(f"box {self.box} for {self.image_id!r} leaves the image")
        if (self.width is not None and x1 > self.width) or (self.height is not None and y1 > self.height):
            raise ValueError(f"box {self.box} for {self.image_id!r} leaves the image")

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.box
        return x0 <= x < x1 and y0 <= y < y1

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": list(self.box)}


@dataclass
class PibReport:
    layers: list[int]
    fractions: list[float]
    hits: list[int]
    n_images: int
    argmax_coords: list[list[tuple[int, int]]] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "fractions": self.fractions,
            "hits": self.hits,
            "n_images": self.n_images,
            "argmax_coords": [[list(c) for c in per] for per in self.argmax_coords],
        }


def patch_center(row: int, col: int, patch_size: int) -> tuple[float, float]:
    """Pixel (x, y) center of patch (row, col)."""
    return (col + 0.5) * patch_size, (row + 0.5) * patch_size


def _box_index(boxes) -> Mapping[str, BoxAnnotation]:
    if isinstance(boxes, Mapping):
        return boxes
    return {b.image_id: b for b in boxes}


def pib(batch: Sequence[LayerFeatures], boxes: Sequence[BoxAnnotation] | Mapping[str, BoxAnnotation],
        layers: Sequence[int] | None = None) -> PibReport:
    """Point-in-box fraction for each layer (1-based; all layers by default)."""
    if not batch:
        raise ValueError("pib needs at least one image")
    index = _box_index(boxes)
    for f in batch:
        if f.image_id not in index:
            raise MissingAnnotationError(f"no box annotation for image {f.image_id!r}")
    layers = list(layers) if layers is not None else list(range(1, batch[0].n_layers + 1))

    fractions, hits, coords = [], [], []
    for layer in layers:
        n_hit = 0
        per_image = []
        for f in batch:
            sims = cosine_similarity(f.cls(layer), f.patches(layer))[0]
            row, col = f.patch_coords(int(np.argmax(sims)))
            per_image.append((row, col))
            if index[f.image_id].contains(*patch_center(row, col, f.patch_size)):
                n_hit += 1
        hits.append(n_hit)
        fractions.append(n_hit / len(batch))
        coords.append(per_image)
    return PibReport(layers, fractions, hits, len(batch), coords)


def cls_patch_similarity(features: LayerFeatures, layer: int | str) -> np.ndarray:
    """Cosine similarity of the CLS token to every patch, as a grid."""
    sims = cosine_similarity(features.cls(layer), features.patches(layer))[0]
    return sims.reshape(features.grid)
