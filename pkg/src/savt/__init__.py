"""Exact entmax-1.5 attention in a small Vision Transformer, with dense-feature analysis tools."""

from .normalizers import (
    Normalizer,
    NormalizerResult,
    entmax15_bisect,
    entmax15_sort,
    entmax15_vjp,
    softmax,
    softmax_vjp,
    support_stats,
)
from .numerics import Rng
from .vit import LayerFeatures, LayerSet, VitConfig, VitModel, extract_layer_set, forward_features, init_model

__version__ = "0.1.0"

__all__ = [
    "LayerFeatures",
    "LayerSet",
    "Normalizer",
    "NormalizerResult",
    "Rng",
    "VitConfig",
    "VitModel",
    "entmax15_bisect",
    "entmax15_sort",
    "entmax15_vjp",
    "extract_layer_set",
    "forward_features",
    "init_model",
    "softmax",
    "softmax_vjp",
    "support_stats",
]
