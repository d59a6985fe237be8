"""Top-3 principal components of patch features rendered as RGB.

Components come from the eigendecomposition of the centered Gram matrix
(equivalently, the left singular vectors of the centered feature matrix).
Each Gram entry is summed over its products in sorted order, which makes the
result bit-identical under any permutation of the feature dimensions. Signs
are fixed so that the largest-magnitude loading of each component is
positive; each channel is then min-max scaled to [0, 1].
"""

from __future__ import annotations

import numpy as np

from ..numerics import DimensionError, as_tensor, matmul

__all__ = ["DegenerateRankError", "pca_components", "pca_rgb"]

_CHUNK = 1 << 22


class DegenerateRankError(ValueError):
    def __init__(self, rank: int):
        super().__init__(f"centered features have rank {rank}; PCA-RGB needs rank >= 3")
        self.rank = rank


def _gram(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    g = np.empty((n, n))
    rows = max(1, _CHUNK // max(1, n * d))
    for start in range(0, n, rows):
        prod = x[start:start + rows, None, :] * x[None, :, :]
        prod.sort(axis=-1)
        g[start:start + rows] = np.add.reduce(prod, axis=-1)
    return g


def pca_components(features, k: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(scores, loadings, variances)`` for the top ``k`` components.

    ``scores`` is N x k (projections of the centered rows), ``loadings`` is
    d x k with unit columns.
    """
    x = as_tensor(features)
    if x.ndim != 2:
        raise DimensionError(f"expected N x d features, got {x.shape}")
    n, d = x.shape
    if d < k:
        raise DimensionError(f"feature width {d} is below the {k} requested components")
    x = x - np.add.reduce(x, axis=0) / n
    evals, evecs = np.linalg.eigh(_gram(x))
    tol = max(evals[-1], 0.0) * max(n, d) * np.finfo(np.float64).eps
    rank = int(np.count_nonzero(evals > tol))
    if rank < k:
        raise DegenerateRankError(rank)
    order = np.argsort(-evals, kind="stable")[:k]
    lam = evals[order]
    u = evecs[:, order]
    loadings = matmul(x.T, u) / np.sqrt(lam)
    sign = np.sign(loadings[np.argmax(np.abs(loadings), axis=0), np.arange(k)])
    return u * np.sqrt(lam) * sign, loadings * sign, lam / n


def pca_rgb(patch_features, grid: tuple[int, int]) -> np.ndarray:
    """h x w x 3 image in [0, 1] from the first three principal components."""
    h, w = grid
    x = as_tensor(patch_features)
    if x.ndim != 2 or x.shape[0] != h * w:
        raise DimensionError(f"{x.shape[0] if x.ndim else 0} patch rows do not fill a {h}x{w} grid")
    if x.shape[1] < 3:
        raise DimensionError(f"PCA-RGB needs at least 3 feature dims, got {x.shape[1]}")
    scores, _, _ = pca_components(x, 3)
    lo = scores.min(axis=0)
    span = scores.max(axis=0) - lo
    rgb = (scores - lo) / np.where(span > 0, span, 1.0)
    return rgb.reshape(h, w, 3)
