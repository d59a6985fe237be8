"""Scaled dot-product and multi-head attention with a pluggable normalizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .normalizers import Normalizer, normalize_rows, normalize_vjp_rows
from .numerics import DimensionError, as_tensor, matmul

__all__ = [
    "AttentionConfig",
    "AttentionWeights",
    "attend",
    "attention_logits",
    "multi_head_attend",
    "attend_grad_logits",
]


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    normalizer: Normalizer = Normalizer.SOFTMAX
    solver: str = "sort"

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        object.__setattr__(self, "normalizer", Normalizer(self.normalizer))
        if self.solver not in ("sort", "bisect"):
            raise ValueError(f"unknown entmax solver {self.solver!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionWeights:
    """Projection matrices in ``x @ W`` convention, all d_model x d_model."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray | None = None
    b_k: np.ndarray | None = None
    b_v: np.ndarray | None = None
    b_o: np.ndarray | None = None

    def check(self, cfg: AttentionConfig) -> None:
        d = cfg.d_model
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")
        for name in ("b_q", "b_k", "b_v", "b_o"):
            b = getattr(self, name)
            if b is not None and b.shape != (d,):
                raise DimensionError(f"{name} has shape {b.shape}, expected {(d,)}")


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    y = matmul(x, w)
    if b is not None:
        y += b
    return y


def attention_logits(q, k) -> np.ndarray:
    """QK^T / sqrt(d_head)."""
    q, k = as_tensor(q), as_tensor(k)
    return matmul(q, k.T) * (1.0 / math.sqrt(q.shape[1]))


def attend(cfg: AttentionConfig, q, k, v) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention. Returns ``(Y, A)`` with A = normalize(QK^T/sqrt(d)), Y = AV."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1] or v.ndim != 2 or v.shape[0] != k.shape[0]:
        raise DimensionError(f"attend: Q {q.shape}, K {k.shape}, V {v.shape}")
    if q.shape[1] < 1:
        raise DimensionError("attend: d_head must be at least 1")
    a = normalize_rows(attention_logits(q, k), cfg.normalizer, cfg.solver)
    return matmul(a, v), a


def multi_head_attend(cfg: AttentionConfig, weights: AttentionWeights, x) -> tuple[np.ndarray, np.ndarray]:
    """Project, split heads, attend per head, concatenate and project out.

    Returns ``(Y, A_all)`` where ``A_all`` has shape heads x T x T.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise DimensionError(f"multi_head_attend: X {x.shape}, d_model {cfg.d_model}")
    if not np.all(np.isfinite(x)):
        raise ValueError("multi_head_attend: non-finite input")
    weights.check(cfg)
    q = _linear(x, weights.w_q, weights.b_q)
    k = _linear(x, weights.w_k, weights.b_k)
    v = _linear(x, weights.w_v, weights.b_v)
    dh = cfg.d_head
    heads = []
    maps = np.empty((cfg.n_heads, x.shape[0], x.shape[0]))
    for h in range(cfg.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        y_h, maps[h] = attend(cfg, q[:, cols], k[:, cols], v[:, cols])
        heads.append(y_h)
    y = _linear(np.concatenate(heads, axis=1), weights.w_o, weights.b_o)
    return y, maps


def attend_grad_logits(cfg: AttentionConfig, logits, v, upstream_y) -> np.ndarray:
    """Gradient of <upstream_y, normalize(logits) V> with respect to the logits.

    ``logits`` is the normalizer input (already scaled), T x T.
    """
    logits, v, g = as_tensor(logits), as_tensor(v), as_tensor(upstream_y)
    t = logits.shape[0]
    if logits.shape != (t, t) or v.shape[0] != t or g.shape != (t, v.shape[1]):
        raise DimensionError(f"attend_grad_logits: logits {logits.shape}, V {v.shape}, dY {g.shape}")
    a = normalize_rows(logits, cfg.normalizer, cfg.solver)
    grad_a = matmul(g, v.T)
    return normalize_vjp_rows(a, grad_a, cfg.normalizer)
