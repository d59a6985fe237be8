"""Linear probes on frozen features.

Three tasks share one minibatch-SGD loop:

* ``cls``   linear classifier on per-image features, cross-entropy, top-1.
* ``dense`` per-patch classifier; a trained batch-norm layer (affine,
            momentum 0.1) precedes the linear head; cross-entropy, mean IoU.
* ``depth`` per-patch linear regressor, squared error, RMSE.

Features are never modified. Minibatch order comes from the seed only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from ..numerics import Rng, as_tensor, matmul
from ..vit import LayerFeatures, LayerSet, stack_layer_set

__all__ = [
    "ProbeTask",
    "ProbeHyper",
    "ProbeReport",
    "ProbeDivergenceError",
    "PROTOCOLS",
    "CLS_LR_GRID",
    "train_linear_probe",
    "layer_sweep",
    "layer_sweep_model",
    "global_bit_task",
    "mean_iou",
]

# learning-rate grid used for image-level probing
CLS_LR_GRID = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1)


class ProbeTask(str, Enum):
    CLASSIFICATION = "cls"
    DENSE_SEG = "dense"
    DENSE_DEPTH = "depth"


class ProbeDivergenceError(ArithmeticError):
    def __init__(self, step: int, lr: float):
        super().__init__(f"probe loss became non-finite at step {step} (lr={lr})")
        self.step = step
        self.lr = lr


@dataclass
class ProbeHyper:
    lr: float = 1e-3
    iters: int = 1000
    batch: int = 64
    seed: int = 0
    lr_grid: Sequence[float] | None = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.iters < 1 or self.batch < 1:
            raise ValueError("iters and batch must be positive")
        if self.lr <= 0 or (self.lr_grid is not None and any(v <= 0 for v in self.lr_grid)):
            raise ValueError("learning rates must be positive")


# Full-scale settings; desk-scale runs override iters.
PROTOCOLS = {
    ProbeTask.CLASSIFICATION: ProbeHyper(lr=1e-3, iters=12_500, lr_grid=CLS_LR_GRID),
    ProbeTask.DENSE_SEG: ProbeHyper(lr=1e-3, iters=40_000),
    ProbeTask.DENSE_DEPTH: ProbeHyper(lr=1e-3, iters=38_400),
}


@dataclass
class ProbeReport:
    task: ProbeTask
    iters: int
    lr: float
    curve: list[float]
    metric: float
    metric_name: str
    d_in: int
    grid: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d


def mean_iou(pred: np.ndarray, target: np.ndarray, n_classes: int) -> float:
    """Mean IoU over classes that occur in either prediction or target."""
    ious = []
    for c in range(n_classes):
        p, t = pred == c, target == c
        union = np.count_nonzero(p | t)
        if union:
            ious.append(np.count_nonzero(p & t) / union)
    return float(np.mean(ious)) if ious else 0.0


class _Head:
    """Linear head, optionally preceded by batch norm."""

    def __init__(self, d: int, out: int, use_bn: bool, hyper: ProbeHyper):
        self.w = np.zeros((d, out))
        self.b = np.zeros(out)
        self.use_bn = use_bn
        self.gamma = np.ones(d)
        self.beta = np.zeros(d)
        self.run_mean = np.zeros(d)
        self.run_var = np.ones(d)
        self.momentum = hyper.bn_momentum
        self.eps = hyper.bn_eps
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if self.use_bn:
            if train:
                mean = x.mean(axis=0)
                var = x.var(axis=0)
                n = x.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                self.run_mean = (1 - self.momentum) * self.run_mean + self.momentum * mean
                self.run_var = (1 - self.momentum) * self.run_var + self.momentum * unbiased
            else:
                mean, var = self.run_mean, self.run_var
            xhat = (x - mean) / np.sqrt(var + self.eps)
            x = xhat * self.gamma + self.beta
            self._cache = xhat
        self._input = x
        return matmul(x, self.w) + self.b

    def step(self, grad_out: np.ndarray, lr: float) -> None:
        grad_w = matmul(self._input.T, grad_out)
        grad_b = grad_out.sum(axis=0)
        if self.use_bn:
            grad_y = matmul(grad_out, self.w.T)
            self.gamma -= lr * (grad_y * self._cache).sum(axis=0)
            self.beta -= lr * grad_y.sum(axis=0)
        self.w -= lr * grad_w
        self.b -= lr * grad_b


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _train_once(x, y, task: ProbeTask, lr: float, hyper: ProbeHyper, n_out: int,
                x_eval, y_eval) -> tuple[list[float], float]:
    n, d = x.shape
    head = _Head(d, n_out, use_bn=task is ProbeTask.DENSE_SEG, hyper=hyper)
    rng = Rng(hyper.seed)
    batch = min(hyper.batch, n)
    steps_per_epoch = max(1, n // batch)
    curve: list[float] = []
    epoch_losses: list[float] = []
    order = rng.permutation(n)
    pos = 0
    for step in range(hyper.iters):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        xb, yb = x[idx], y[idx]
        out = head.forward(xb, train=True)
        if task is ProbeTask.DENSE_DEPTH:
            err = out[:, 0] - yb
            loss = float(np.mean(err * err))
            grad = (2.0 / batch) * err[:, None]
        else:
            prob = _softmax(out)
            loss = float(-np.mean(np.log(np.maximum(prob[np.arange(batch), yb], 1e-300))))
            grad = prob
            grad[np.arange(batch), yb] -= 1.0
            grad /= batch
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise ProbeDivergenceError(step, lr)
        head.step(grad, lr)
        epoch_losses.append(loss)
        if len(epoch_losses) == steps_per_epoch or step == hyper.iters - 1:
            curve.append(float(np.mean(epoch_losses)))
            epoch_losses = []

    out = head.forward(x_eval, train=False)
    if not np.all(np.isfinite(out)):
        raise ProbeDivergenceError(hyper.iters, lr)
    if task is ProbeTask.DENSE_DEPTH:
        metric = float(np.sqrt(np.mean((out[:, 0] - y_eval) ** 2)))
    elif task is ProbeTask.CLASSIFICATION:
        metric = float(np.mean(np.argmax(out, axis=1) == y_eval))
    else:
        metric = mean_iou(np.argmax(out, axis=1), y_eval, n_out)
    return curve, metric


_METRIC = {
    ProbeTask.CLASSIFICATION: "top1",
    ProbeTask.DENSE_SEG: "miou",
    ProbeTask.DENSE_DEPTH: "rmse",
}


def train_linear_probe(features, targets, task: ProbeTask | str, hyper: ProbeHyper | None = None,
                       eval_features=None, eval_targets=None,
                       n_classes: int | None = None) -> ProbeReport:
    """Fit a linear probe on frozen ``features`` (N x d).

    ``targets`` are class ids (cls/dense) or positive depths (depth). Without
    an eval split the metric is measured on the training set. With
    ``hyper.lr_grid`` every learning rate is trained and the best eval metric
    wins; grid members that diverge are recorded and skipped.
    """
    task = ProbeTask(task)
    hyper = hyper or ProbeHyper()
    x = as_tensor(features)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError("features must be a finite N x d array")
    if task is ProbeTask.DENSE_DEPTH:
        y = as_tensor(targets).reshape(-1)
        if np.any(y <= 0) or not np.all(np.isfinite(y)):
            raise ValueError("depth targets must be positive and finite")
        n_out = 1
    else:
        y = np.asarray(targets, dtype=np.int64).reshape(-1)
        if y.size and y.min() < 0:
            raise ValueError("class ids must be nonnegative")
        n_out = int(n_classes) if n_classes else int(y.max()) + 1
        if y.max() >= n_out:
            raise ValueError(f"class id {int(y.max())} exceeds n_classes={n_out}")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows vs {y.shape[0]} targets")
    if eval_features is None:
        x_eval, y_eval = x, y
    else:
        x_eval = as_tensor(eval_features)
        y_eval = (as_tensor(eval_targets) if task is ProbeTask.DENSE_DEPTH
                  else np.asarray(eval_targets, dtype=np.int64)).reshape(-1)

    lrs = list(hyper.lr_grid) if hyper.lr_grid else [hyper.lr]
    higher_better = task is not ProbeTask.DENSE_DEPTH
    best = None
    grid = []
    for lr in lrs:
        try:
            # overflow is caught below as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                curve, metric = _train_once(x, y, task, lr, hyper, n_out, x_eval, y_eval)
        except ProbeDivergenceError:
            if len(lrs) == 1:
                raise
            grid.append({"lr": lr, "metric": None, "diverged": True})
            continue
        grid.append({"lr": lr, "metric": metric, "diverged": False})
        if best is None or (metric > best[2] if higher_better else metric < best[2]):
            best = (lr, curve, metric)
    if best is None:
        raise ProbeDivergenceError(hyper.iters, lrs[-1])
    lr, curve, metric = best
    return ProbeReport(task, hyper.iters, lr, curve, metric, _METRIC[task], x.shape[1],
                       grid if hyper.lr_grid else [])


def _split(n_images: int, train_fraction: float) -> int:
    n_train = int(round(n_images * train_fraction))
    if not 0 < n_train < n_images:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty split of {n_images} images")
    return n_train


def layer_sweep(batch: Sequence[LayerFeatures], patch_labels, concat_cls: bool,
                hyper: ProbeHyper | None = None, task: ProbeTask | str = ProbeTask.DENSE_SEG,
                train_fraction: float = 0.75, n_classes: int | None = None) -> list[ProbeReport]:
    """Dense probe on every layer's patch tokens (pre final norm).

    ``patch_labels`` is images x patches (flattened grid). The first
    ``train_fraction`` of images train the probe, the rest are evaluated.
    """
    task = ProbeTask(task)
    labels = np.asarray(patch_labels).reshape(len(batch), -1)
    n_train = _split(len(batch), train_fraction)
    if n_classes is None and task is ProbeTask.DENSE_SEG:
        n_classes = int(labels.max()) + 1
    reports = []
    for layer in range(1, batch[0].n_layers + 1):
        kw = dict(mode=LayerSet.SINGLE, layer=layer, concat_cls=concat_cls)
        reports.append(train_linear_probe(
            stack_layer_set(batch[:n_train], **kw), labels[:n_train].reshape(-1), task, hyper,
            eval_features=stack_layer_set(batch[n_train:], **kw),
            eval_targets=labels[n_train:].reshape(-1), n_classes=n_classes,
        ))
    return reports


def layer_sweep_model(model, images, patch_labels, concat_cls: bool, threads: int = 1,
                      **kwargs) -> list[ProbeReport]:
    from ..vit import forward_batch

    return layer_sweep(forward_batch(model, images, threads=threads), patch_labels, concat_cls,
                       **kwargs)


def global_bit_task(batch: Sequence[LayerFeatures], masks, seed: int = 0
                    ) -> tuple[list[LayerFeatures], np.ndarray, np.ndarray]:
    """Dense task whose labels need a per-image bit that only the CLS token carries.

    Each image gets a random bit b. Its CLS vector is shifted by +-(its own
    norm, at least 1) along a fixed random unit direction at every layer and
    after the final norm; patch tokens are untouched. Patch labels are 0 for background
    and 1 + b for foreground, so patch-only probes cannot tell classes 1 and
    2 apart. Returns ``(new_batch, patch_labels, bits)``.
    """
    rng = Rng(seed)
    bits = rng.integers(0, 2, len(batch))
    d = batch[0].final.shape[1]
    direction = rng.normal(d)
    direction /= np.linalg.norm(direction)
    fg = np.asarray(masks).reshape(len(batch), -1) > 0
    labels = np.where(fg, 1 + bits[:, None], 0)

    def shift(tokens: np.ndarray, b: int, size: float) -> np.ndarray:
        out = tokens.copy()
        out[0] = out[0] + (2 * b - 1) * size * direction
        return out

    new_batch = []
    for f, b in zip(batch, bits):
        layers = []
        for t in f.layers:
            size = max(float(np.linalg.norm(t[0])), 1.0)
            layers.append(shift(t, b, size))
        final = shift(f.final, b, max(float(np.linalg.norm(f.final[0])), 1.0))
        new_batch.append(LayerFeatures(layers, final, f.n_registers, f.grid, f.patch_size,
                                       f.image_id))
    return new_batch, labels, bits
