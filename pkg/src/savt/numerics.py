"""Dense float64 array primitives used by every other module.

Arrays are plain row-major ``numpy.ndarray`` objects in float64. Anything
that feeds a reduction goes through a fixed summation order so results are
reproducible across runs and machines:

* ``matmul`` accumulates strictly left to right over the inner extent.
* Axis reductions use ``numpy.add.reduce`` on a C-contiguous copy, whose
  pairwise order depends only on the extent.

The RNG is numpy's Philox-4x64 counter-based generator, which produces the
same stream on every platform for the same seed.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "Rng",
    "as_tensor",
    "matmul",
    "layer_norm",
    "gelu",
    "transpose",
    "reshape",
    "add",
    "mul",
    "scale",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "argmax",
    "concat",
    "gather_rows",
    "cosine_similarity",
]

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    """Promote to a C-contiguous float64 array (no copy when already one)."""
    arr = np.asarray(x, dtype=DTYPE)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class Rng:
    """Seeded Philox-4x64 stream.

    Two ``Rng`` objects built from the same seed yield identical draws on any
    platform; numpy guarantees bit stability for Philox and for the
    ``standard_normal``/``random``/``integers``/``permutation`` methods used
    here.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be nonnegative, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return std * self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated to +-bound*std by resampling."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return std * out

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key``."""
        return Rng(int(np.random.SeedSequence([self.seed, key]).generate_state(1)[0]))


def matmul(a, b) -> np.ndarray:
    """``a @ b`` for 2-D operands, accumulating over k from left to right."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=DTYPE)
    if k == 0:
        return out
    # column-major copy of a makes a[:, i] contiguous in the loop
    at = np.ascontiguousarray(a.T)
    tmp = np.empty((m, n), dtype=DTYPE)
    for i in range(k):
        np.multiply(at[i][:, None], b[i][None, :], out=tmp)
        out += tmp
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> np.ndarray:
    """Normalize the last axis with the population variance, then apply gamma/beta."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last axis {d} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = np.add.reduce(x, axis=-1, keepdims=True) / d
    centered = x - mean
    var = np.add.reduce(centered * centered, axis=-1, keepdims=True) / d
    return centered / np.sqrt(var + eps) * gamma + beta


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x) -> np.ndarray:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def transpose(x, axes: Sequence[int] | None = None) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(as_tensor(x), axes))


def reshape(x, shape: Sequence[int]) -> np.ndarray:
    x = as_tensor(x)
    try:
        return x.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return a + b


def mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return a * b


def scale(a, c: float) -> np.ndarray:
    return as_tensor(a) * float(c)


def reduce_sum(x, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    return np.add.reduce(as_tensor(x), axis=axis, keepdims=keepdims)


def reduce_mean(x, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    x = as_tensor(x)
    return np.add.reduce(x, axis=axis, keepdims=keepdims) / x.shape[axis]


def reduce_max(x, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    return np.max(as_tensor(x), axis=axis, keepdims=keepdims)


def argmax(x, axis: int = -1) -> np.ndarray:
    """Index of the maximum; ties resolve to the lowest index."""
    return np.argmax(as_tensor(x), axis=axis)


def concat(parts: Sequence, axis: int = -1) -> np.ndarray:
    parts = [as_tensor(p) for p in parts]
    try:
        return np.concatenate(parts, axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat along axis {axis}: shapes {[p.shape for p in parts]}"
        ) from exc


def gather_rows(x, index) -> np.ndarray:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    return np.ascontiguousarray(x[index])


def cosine_similarity(a, b, eps: float = 1e-300) -> np.ndarray:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``.

    Returns an ``len(a) x len(b)`` array. Zero-norm rows give similarity 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        a = a[None, :]
    if b.ndim == 1:
        b = b[None, :]
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_similarity: widths {a.shape[1]} vs {b.shape[1]}")
    na = np.sqrt(np.add.reduce(a * a, axis=1))
    nb = np.sqrt(np.add.reduce(b * b, axis=1))
    dots = matmul(a, b.T)
    denom = np.maximum(na[:, None] * nb[None, :], eps)
    return dots / denom
