"""A small pre-norm Vision Transformer for inference and feature extraction.

Token layout is ``[CLS, reg_1 .. reg_R, patch_1 .. patch_N]`` with patches in
raster order over the patch grid. Learned positional embeddings are added to
patch tokens only. Every attention layer uses the normalizer named in the
config.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import container
from .attention import AttentionConfig, AttentionWeights, multi_head_attend
from .container import ManifestError
from .normalizers import Normalizer
from .numerics import DimensionError, Rng, as_tensor, gelu, layer_norm, matmul

__all__ = [
    "VitConfig",
    "VitModel",
    "LayerFeatures",
    "LayerSet",
    "init_model",
    "forward_features",
    "forward_batch",
    "save_model",
    "load_model",
    "save_features",
    "load_features",
    "extract_layer_set",
    "stack_layer_set",
    "four_evenly_spaced",
    "param_shapes",
]


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    patch_size: int = 16
    d_model: int = 384
    n_heads: int = 6
    n_layers: int = 12
    mlp_ratio: int = 4
    n_registers: int = 0
    normalizer: Normalizer = Normalizer.SOFTMAX
    ln_eps: float = 1e-6
    solver: str = "sort"

    def __post_init__(self):
        object.__setattr__(self, "normalizer", Normalizer(self.normalizer))
        for name in ("image_size", "patch_size", "d_model", "n_heads", "n_layers", "mlp_ratio"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_registers < 0:
            raise ValueError("n_registers must be nonnegative")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads {self.n_heads} does not divide d_model {self.d_model}")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")
        if self.solver not in ("sort", "bisect"):
            raise ValueError(f"unknown entmax solver {self.solver!r}")

    @classmethod
    def tiny(cls, **overrides) -> "VitConfig":
        base = dict(image_size=32, patch_size=8, d_model=16, n_heads=2, n_layers=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def vit_s(cls, **overrides) -> "VitConfig":
        return cls(**overrides)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_registers + self.n_patches

    @property
    def d_mlp(self) -> int:
        return self.d_model * self.mlp_ratio

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.normalizer, self.solver)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalizer"] = self.normalizer.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the order is the file order."""
    d, p = cfg.d_model, cfg.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (3 * p * p, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.n_patches, d),
        "cls_token": (d,),
    }
    if cfg.n_registers:
        shapes["reg_tokens"] = (cfg.n_registers, d)
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        shapes[b + "ln1.gamma"] = (d,)
        shapes[b + "ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[b + f"attn.w_{proj}"] = (d, d)
            shapes[b + f"attn.b_{proj}"] = (d,)
        shapes[b + "ln2.gamma"] = (d,)
        shapes[b + "ln2.beta"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (d, cfg.d_mlp)
        shapes[b + "mlp.fc1.bias"] = (cfg.d_mlp,)
        shapes[b + "mlp.fc2.weight"] = (cfg.d_mlp, d)
        shapes[b + "mlp.fc2.bias"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    return shapes


@dataclass
class VitModel:
    config: VitConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def attention_weights(self, layer: int) -> AttentionWeights:
        b = f"blocks.{layer}.attn."
        return AttentionWeights(
            **{f"{kind}_{proj}": self.params[b + f"{kind}_{proj}"]
               for kind in ("w", "b") for proj in ("q", "k", "v", "o")}
        )


def init_model(cfg: VitConfig, rng: Rng | int) -> VitModel:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit LN gains."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            params[name] = np.ones(shape)
        elif leaf == "beta" or leaf == "bias" or leaf.startswith("b_"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.truncated_normal(shape, std=0.02)
    return VitModel(cfg, params)


class LayerSet(str, Enum):
    FINAL = "final"
    FOUR_EVENLY_SPACED = "four"
    SINGLE = "single"


@dataclass
class LayerFeatures:
    """Token features from one forward pass.

    ``layers[l]`` holds the post-block tokens of block ``l + 1`` (T x d);
    ``final`` is the last block's output after the final layer norm.
    """

    layers: list[np.ndarray]
    final: np.ndarray
    n_registers: int
    grid: tuple[int, int]
    patch_size: int
    image_id: str = ""
    attention: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_tokens(self) -> int:
        return self.final.shape[0]

    @property
    def patch_slice(self) -> slice:
        return slice(1 + self.n_registers, self.n_tokens)

    @property
    def register_slice(self) -> slice:
        return slice(1, 1 + self.n_registers)

    def patch_coords(self, index: int) -> tuple[int, int]:
        """(row, col) of the patch with flat index ``index``."""
        return divmod(int(index), self.grid[1])

    def tokens(self, layer: int | str) -> np.ndarray:
        """Tokens of block ``layer`` (1-based) or ``"final"``."""
        if layer == "final":
            return self.final
        if not isinstance(layer, (int, np.integer)) or not 1 <= layer <= self.n_layers:
            raise IndexError(f"layer {layer!r} out of range 1..{self.n_layers}")
        return self.layers[layer - 1]

    def cls(self, layer: int | str) -> np.ndarray:
        return self.tokens(layer)[0]

    def patches(self, layer: int | str) -> np.ndarray:
        return self.tokens(layer)[self.patch_slice]


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """H x W x 3 image to (grid*grid) x (p*p*3) rows in raster order."""
    h, w, c = image.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = image.reshape(g_h, patch_size, g_w, patch_size, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(g_h * g_w, patch_size * patch_size * c))


def embed(model: VitModel, image) -> np.ndarray:
    cfg = model.config
    image = as_tensor(image)
    if image.shape != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"image shape {image.shape}, model expects {(cfg.image_size, cfg.image_size, 3)}"
        )
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")
    prm = model.params
    patches = matmul(patchify(image, cfg.patch_size), prm["patch_embed.weight"])
    patches += prm["patch_embed.bias"]
    patches += prm["pos_embed"]
    parts = [prm["cls_token"][None, :]]
    if cfg.n_registers:
        parts.append(prm["reg_tokens"])
    parts.append(patches)
    return np.concatenate(parts, axis=0)


def block_forward(model: VitModel, layer: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.config
    prm = model.params
    b = f"blocks.{layer}."
    h = layer_norm(x, prm[b + "ln1.gamma"], prm[b + "ln1.beta"], cfg.ln_eps)
    y, maps = multi_head_attend(cfg.attention, model.attention_weights(layer), h)
    x = x + y
    h = layer_norm(x, prm[b + "ln2.gamma"], prm[b + "ln2.beta"], cfg.ln_eps)
    h = gelu(matmul(h, prm[b + "mlp.fc1.weight"]) + prm[b + "mlp.fc1.bias"])
    x = x + matmul(h, prm[b + "mlp.fc2.weight"]) + prm[b + "mlp.fc2.bias"]
    return x, maps


def forward_features(model: VitModel, image, image_id: str = "",
                     return_attention: bool = False) -> LayerFeatures:
    cfg = model.config
    x = embed(model, image)
    layers = []
    maps = []
    for i in range(cfg.n_layers):
        x, a = block_forward(model, i, x)
        layers.append(x)
        if return_attention:
            maps.append(a)
    final = layer_norm(x, model.params["final_ln.gamma"], model.params["final_ln.beta"], cfg.ln_eps)
    return LayerFeatures(
        layers=layers,
        final=final,
        n_registers=cfg.n_registers,
        grid=(cfg.grid, cfg.grid),
        patch_size=cfg.patch_size,
        image_id=image_id,
        attention=maps if return_attention else None,
    )


def forward_batch(model: VitModel, images: Sequence, image_ids: Sequence[str] | None = None,
                  threads: int = 1, return_attention: bool = False) -> list[LayerFeatures]:
    """Forward several images; results are independent of ``threads``."""
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(images))]
    if len(ids) != len(images):
        raise ValueError("image_ids and images differ in length")

    def run(i):
        return forward_features(model, images[i], ids[i], return_attention)

    if threads <= 1 or len(images) < 2:
        return [run(i) for i in range(len(images))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(len(images))))


# -- layer selection -------------------------------------------------------


def four_evenly_spaced(n_layers: int) -> list[int]:
    """1-based layers ceil(n*k/4), k = 1..4; {3, 6, 9, 12} for 12 layers."""
    if n_layers < 4:
        raise ValueError(f"four evenly spaced layers need n_layers >= 4, got {n_layers}")
    return [-(-n_layers * k // 4) for k in range(1, 5)]


def extract_layer_set(features: LayerFeatures, mode: LayerSet | str = LayerSet.FINAL,
                      concat_cls: bool = False, layer: int | None = None,
                      include_registers: bool = False) -> np.ndarray:
    """Per-patch probe inputs, one row per patch.

    FINAL: final-LN patch tokens. FOUR_EVENLY_SPACED: pre-LN patch tokens of
    the four layers side by side. SINGLE: pre-LN patch tokens of ``layer``.
    With ``concat_cls`` the CLS vectors of the same layers are appended to
    every row. Register tokens are excluded unless ``include_registers``, in
    which case they are prepended as extra rows.
    """
    mode = LayerSet(mode)
    if mode is LayerSet.FINAL:
        chosen: list[int | str] = ["final"]
    elif mode is LayerSet.FOUR_EVENLY_SPACED:
        chosen = list(four_evenly_spaced(features.n_layers))
    else:
        if layer is None:
            raise ValueError("SINGLE mode needs a layer")
        chosen = [layer]
    rows = slice(1, features.n_tokens) if include_registers else features.patch_slice
    blocks = [features.tokens(l)[rows] for l in chosen]
    n = blocks[0].shape[0]
    if concat_cls:
        blocks += [np.broadcast_to(features.cls(l), (n, features.final.shape[1])) for l in chosen]
    return np.ascontiguousarray(np.concatenate(blocks, axis=1))


def stack_layer_set(batch: Sequence[LayerFeatures], **kwargs) -> np.ndarray:
    """``extract_layer_set`` over images, rows concatenated in image order."""
    return np.concatenate([extract_layer_set(f, **kwargs) for f in batch], axis=0)


# -- persistence -----------------------------------------------------------


def save_model(model: VitModel, path, dtype: str = "float64") -> None:
    """Write a model file; ``dtype`` is the storage precision (float32 or float64)."""
    if dtype not in ("float32", "float64"):
        raise ValueError(f"storage dtype must be float32 or float64, got {dtype!r}")
    container.write(path, "model", model.params, {"config": model.config.to_dict()},
                    {name: dtype for name in model.params})


def _model_validator(manifest: dict) -> None:
    if manifest.get("kind") != "model":
        raise ManifestError(f"expected a model file, found kind {manifest.get('kind')!r}")
    try:
        cfg = VitConfig.from_dict(manifest["meta"]["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad config in manifest: {exc}") from exc
    expected = param_shapes(cfg)
    listed = {e["name"]: tuple(e["shape"]) for e in manifest["tensors"]}
    if list(listed) != list(expected):
        raise ManifestError("tensor names in manifest do not match the config")
    for name, shape in expected.items():
        if listed[name] != shape:
            raise ManifestError(f"manifest shape for {name} is {list(listed[name])}, config implies {list(shape)}")
    if any(e["dtype"] not in ("float32", "float64") for e in manifest["tensors"]):
        raise ManifestError("model tensors must be float32 or float64")


def load_model(path) -> VitModel:
    kind, meta, tensors = container.read(path, _model_validator)
    cfg = VitConfig.from_dict(meta["config"])
    params = {name: arr.astype(np.float64) for name, arr in tensors.items()}
    return VitModel(cfg, params)


def save_features(path, batch: Sequence[LayerFeatures], extras: dict | None = None,
                  meta: dict | None = None) -> None:
    """Dump a batch of LayerFeatures (same architecture) plus optional label arrays.

    Per-layer tokens are stacked as ``layer.<l>`` (images x T x d); ``extras``
    are stored under ``extra.<name>``.
    """
    if not batch:
        raise ValueError("nothing to save")
    first = batch[0]
    tensors = {}
    for l in range(1, first.n_layers + 1):
        tensors[f"layer.{l}"] = np.stack([f.tokens(l) for f in batch])
    tensors["final"] = np.stack([f.final for f in batch])
    for name, arr in (extras or {}).items():
        tensors[f"extra.{name}"] = np.asarray(arr)
    info = {
        "n_layers": first.n_layers,
        "n_registers": first.n_registers,
        "grid": list(first.grid),
        "patch_size": first.patch_size,
        "image_ids": [f.image_id for f in batch],
    }
    info.update(meta or {})
    container.write(path, "features", tensors, info)


def load_features(path) -> tuple[list[LayerFeatures], dict, dict]:
    """Returns ``(batch, extras, meta)``."""
    kind, meta, tensors = container.read(path)
    if kind != "features":
        raise ManifestError(f"expected a features file, found kind {kind!r}")
    try:
        n_layers = int(meta["n_layers"])
        ids = list(meta["image_ids"])
        grid = tuple(meta["grid"])
        layers = [tensors[f"layer.{l}"].astype(np.float64) for l in range(1, n_layers + 1)]
        final = tensors["final"].astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"incomplete features manifest: {exc}") from exc
    batch = [
        LayerFeatures(
            layers=[lay[i] for lay in layers],
            final=final[i],
            n_registers=int(meta["n_registers"]),
            grid=(int(grid[0]), int(grid[1])),
            patch_size=int(meta["patch_size"]),
            image_id=str(ids[i]),
        )
        for i in range(len(ids))
    ]
    extras = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    return batch, extras, meta


def with_config(model: VitModel, **changes) -> VitModel:
    """Same parameters under a config differing only in non-structural fields."""
    cfg = replace(model.config, **changes)
    return VitModel(cfg, {k: v.copy() for k, v in model.params.items()})

