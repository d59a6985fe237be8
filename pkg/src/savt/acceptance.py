"""Acceptance criteria as callable checks.

Each ``criterion_*`` function runs one criterion at its fixed tolerance and
returns a :class:`Criterion`. ``run_all`` executes them in order; both the
pytest module and ``savt accept`` go through here.
"""

from __future__ import annotations

import contextlib
import io
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import normalizers as nz
from .analysis import (
    BoxAnnotation,
    ProbeHyper,
    ProbeTask,
    global_bit_task,
    layer_sweep,
    make_scenes,
    pca_components,
    pca_rgb,
    pib,
    train_linear_probe,
)
from .attention import AttentionConfig, attend_grad_logits
from .numerics import Rng
from .vit import (
    LayerFeatures,
    LayerSet,
    VitConfig,
    forward_batch,
    forward_features,
    init_model,
    load_model,
    save_model,
    stack_layer_set,
    with_config,
)

FD_STEP = 1e-6


@dataclass
class Criterion:
    id: int
    name: str
    passed: bool
    observed: dict
    expected: str
    seconds: float = 0.0
    budget: float | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.id:>2}. {self.name}: {self.observed} (expected {self.expected})"

    def to_dict(self, timings: bool = False) -> dict:
        d = {"id": self.id, "name": self.name, "passed": self.passed,
             "observed": self.observed, "expected": self.expected}
        if timings:
            d["seconds"] = round(self.seconds, 3)
            d["budget_seconds"] = self.budget
        return d


def _timed(fn: Callable[[], Criterion], budget: float | None) -> Criterion:
    t0 = time.perf_counter()
    try:
        crit = fn()
    except Exception as exc:  # a crash is a failed criterion, reported by name
        crit = Criterion(0, fn.__name__, False, {"error": f"{type(exc).__name__}: {exc}"}, "no error")
    crit.seconds = time.perf_counter() - t0
    crit.budget = budget
    if budget is not None and crit.seconds > budget:
        crit.passed = False
        crit.observed = dict(crit.observed, over_budget_seconds=round(crit.seconds, 2))
    return crit


# -- shared fixtures -------------------------------------------------------

SCALES = (0.5, 1.0, 2.0, 8.0)


def logit_battery(count: int = 10_000, seed: int = 1) -> list[tuple[float, np.ndarray]]:
    """``count`` random score rows with n in 2..64, scales cycling over SCALES.

    Returned grouped as (scale, rows) blocks of equal length for batching.
    """
    rng = Rng(seed)
    sizes = rng.integers(2, 65, count)
    groups: dict[tuple[float, int], list[np.ndarray]] = {}
    for i, n in enumerate(sizes):
        scale = SCALES[i % len(SCALES)]
        groups.setdefault((scale, int(n)), []).append(scale * rng.normal(int(n)))
    return [(scale, np.stack(rows)) for (scale, _), rows in sorted(groups.items())]


def tie_fixtures() -> list[np.ndarray]:
    r2 = math.sqrt(2.0)
    return [
        np.array([1.0, 1.0, 0.0]),
        np.array([2.0, 2.0, 2.0, -5.0]),
        np.array([0.0, 0.0, -r2]),           # third entry sits on the threshold
        np.array([0.0, 0.0, -r2 + 1e-12]),
        np.array([0.0, 0.0, -r2 - 1e-12]),
        np.array([1.0, 1.0 + 1e-15, 0.0]),
        np.array([3.0, 1.0, 1.0, 1.0, 1.0]),
        np.array([2.0, 0.0]),                # gap exactly 2
        np.array([2.0 - 1e-13, 0.0]),
        np.array([5.0, 5.0, 5.0, 5.0, 5.0, 5.0]),
        np.array([0.5, -0.5, 0.5, -0.5]),
    ]


def central_fd(f: Callable[[np.ndarray], float], z: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    g = np.empty_like(z)
    for j in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp.flat[j] += h
        zm.flat[j] -= h
        g.flat[j] = (f(zp) - f(zm)) / (2 * h)
    return g


def _perturbed_rows(z: np.ndarray, h: float) -> np.ndarray:
    n = z.size
    eye = np.eye(n) * h
    return np.concatenate([z + eye, z - eye])


def support_stable(z: np.ndarray, h: float = FD_STEP) -> bool:
    """True if no +-h coordinate perturbation changes the entmax support."""
    base = nz.entmax15_bisect_rows(z[None, :])[0][0] > 0
    pert = nz.entmax15_bisect_rows(_perturbed_rows(z, h))[0] > 0
    return bool(np.all(pert == base))


def planted_batch(n_images: int, grid: int, patch_size: int, d: int, inside: bool,
                  n_layers: int = 2, seed: int = 0) -> tuple[list[LayerFeatures], list[BoxAnnotation]]:
    """CLS = e0; one patch equals CLS, every other token is orthogonal to e0."""
    rng = Rng(seed)
    size = grid * patch_size
    batch, boxes = [], []
    for i in range(n_images):
        r0, c0 = (int(v) for v in rng.integers(0, grid - 1, 2))
        box = BoxAnnotation(f"p{i}", (c0 * patch_size, r0 * patch_size,
                                      (c0 + 2) * patch_size, (r0 + 2) * patch_size), size, size)
        cells = [(r, c) for r in range(grid) for c in range(grid)
                 if (r0 <= r < r0 + 2 and c0 <= c < c0 + 2) == inside]
        r, c = cells[int(rng.integers(0, len(cells)))]
        layers = []
        for _ in range(n_layers):
            tok = rng.normal((1 + grid * grid, d))
            tok[:, 0] = 0.0
            tok[0] = 0.0
            tok[0, 0] = 1.0
            tok[1 + r * grid + c] = tok[0]
            layers.append(tok)
        batch.append(LayerFeatures(layers, layers[-1].copy(), 0, (grid, grid), patch_size, f"p{i}"))
        boxes.append(box)
    return batch, boxes


def random_pib_batch(n_images: int, grid: int, patch_size: int, box_cells: int, d: int = 8,
                     n_layers: int = 2, seed: int = 0):
    """Gaussian features; each box covers box_cells x box_cells patch centers."""
    rng = Rng(seed)
    size = grid * patch_size
    batch, boxes = [], []
    for i in range(n_images):
        r0, c0 = (int(v) for v in rng.integers(0, grid - box_cells + 1, 2))
        boxes.append(BoxAnnotation(f"r{i}", (c0 * patch_size, r0 * patch_size,
                                             (c0 + box_cells) * patch_size,
                                             (r0 + box_cells) * patch_size), size, size))
        layers = [rng.normal((1 + grid * grid, d)) for _ in range(n_layers)]
        batch.append(LayerFeatures(layers, layers[-1].copy(), 0, (grid, grid), patch_size, f"r{i}"))
    return batch, boxes


def brute_force_pib_hits(batch, boxes, layer: int) -> int:
    """Double loop in plain Python floats."""
    by_id = {b.image_id: b for b in boxes}
    hits = 0
    for f in batch:
        tok = f.tokens(layer).tolist()
        cls = tok[0]
        ncls = math.sqrt(math.fsum(v * v for v in cls))
        best, best_j = -math.inf, -1
        for j, patch in enumerate(tok[1 + f.n_registers:]):
            npatch = math.sqrt(math.fsum(v * v for v in patch))
            sim = math.fsum(a * b for a, b in zip(cls, patch)) / (ncls * npatch)
            if sim > best:
                best, best_j = sim, j
        row, col = divmod(best_j, f.grid[1])
        cx, cy = (col + 0.5) * f.patch_size, (row + 0.5) * f.patch_size
        x0, y0, x1, y1 = by_id[f.image_id].box
        hits += int(x0 <= cx < x1 and y0 <= cy < y1)
    return hits


def naive_pca_scores(x: np.ndarray, k: int = 3) -> np.ndarray:
    xc = x - x.mean(axis=0)
    cov = np.cov(xc, rowvar=False)
    evals, evecs = np.linalg.eig(cov)
    order = np.argsort(-evals.real)[:k]
    return xc @ evecs[:, order].real


# -- criteria --------------------------------------------------------------


def criterion_simplex_sparsity() -> Criterion:
    worst = 0.0
    min_p = math.inf
    sparse_frac, soft_frac = [], []
    for scale, rows in logit_battery():
        for solve in (nz.entmax15_bisect_rows, nz.entmax15_sort_rows):
            p, _ = solve(rows)
            worst = max(worst, float(np.abs(p.sum(axis=1) - 1.0).max()))
            min_p = min(min_p, float(p.min()))
        if scale == 8.0:
            p, _ = nz.entmax15_sort_rows(rows)
            sparse_frac.extend(((p > 0).sum(axis=1) / rows.shape[1]).tolist())
            soft = nz.softmax_rows(rows)
            soft_frac.extend(((soft > 0).sum(axis=1) / rows.shape[1]).tolist())
    mean_sparse = float(np.mean(sparse_frac))
    mean_soft = float(np.mean(soft_frac))
    ok = worst < 1e-9 and min_p >= 0.0 and mean_sparse < 0.9 and mean_soft == 1.0
    return Criterion(1, "entmax simplex + sparsity", ok,
                     {"max_sum_err": worst, "min_p": min_p, "entmax_support@8": round(mean_sparse, 4),
                      "softmax_support@8": mean_soft},
                     "sum err < 1e-9, p >= 0, entmax support < 0.9, softmax support = 1.0")


def criterion_solver_equivalence() -> Criterion:
    worst = 0.0
    for _, rows in logit_battery():
        a, _ = nz.entmax15_bisect_rows(rows)
        b, _ = nz.entmax15_sort_rows(rows)
        worst = max(worst, float(np.abs(a - b).max()))
    ties = 0.0
    for z in tie_fixtures():
        ties = max(ties, float(np.abs(nz.entmax15_bisect(z).p - nz.entmax15_sort(z).p).max()))
    ok = worst < 1e-9 and ties < 1e-9
    return Criterion(2, "sort vs bisect solver equivalence", ok,
                     {"battery_max_diff": worst, "ties_max_diff": ties}, "< 1e-9 elementwise")


def _normalizer_fd_errors(kind: str, points: int, seed: int) -> tuple[float, int]:
    rng = Rng(seed)
    worst, skipped, done = 0.0, 0, 0
    while done < points:
        n = int(rng.integers(2, 17))
        z = rng.normal(n) * [0.5, 1.0, 2.0, 4.0][done % 4]
        g = rng.normal(n)
        if kind == "entmax15":
            if not support_stable(z):
                skipped += 1
                continue
            analytic = nz.entmax15_vjp(nz.entmax15_bisect(z), g)
            numeric = central_fd(lambda v: float(g @ nz.entmax15_bisect(v).p), z)
        else:
            analytic = nz.softmax_vjp(nz.softmax(z), g)
            numeric = central_fd(lambda v: float(g @ nz.softmax(v).p), z)
        worst = max(worst, float(np.abs(analytic - numeric).max()))
        done += 1
    return worst, skipped


def _attention_fd_errors(kind: str, cases: int, seed: int) -> tuple[float, int]:
    rng = Rng(seed)
    worst, skipped, done = 0.0, 0, 0
    while done < cases:
        t = int(rng.integers(1, 7))
        dh = int(rng.integers(1, 9))
        cfg = AttentionConfig(dh, 1, kind, solver="bisect")
        logits = rng.normal((t, t)) * 2.0
        v = rng.normal((t, dh))
        gy = rng.normal((t, dh))
        if kind == "entmax15" and not all(support_stable(row) for row in logits):
            skipped += 1
            continue

        def loss(lg):
            a = nz.normalize_rows(lg, kind, "bisect")
            return float(np.sum(gy * (a @ v)))

        analytic = attend_grad_logits(cfg, logits, v, gy)
        numeric = central_fd(loss, logits)
        worst = max(worst, float(np.abs(analytic - numeric).max()))
        done += 1
    return worst, skipped


def criterion_gradients() -> Criterion:
    ent, ent_skip = _normalizer_fd_errors("entmax15", 500, seed=3)
    soft, _ = _normalizer_fd_errors("softmax", 500, seed=4)
    att_e, att_skip = _attention_fd_errors("entmax15", 100, seed=5)
    att_s, _ = _attention_fd_errors("softmax", 100, seed=6)
    ok = max(ent, soft, att_e, att_s) < 1e-5
    return Criterion(3, "VJP finite-difference checks", ok,
                     {"entmax_vjp": ent, "softmax_vjp": soft, "attend_entmax": att_e,
                      "attend_softmax": att_s, "skipped_unstable": ent_skip + att_skip},
                     "max abs error < 1e-5 (step 1e-6)")


def two_element_tau(a: float, b: float) -> float:
    """Root of ((a - t)/2)^2 + ((b - t)/2)^2 = 1 below min(a, b); needs |a - b| < 2."""
    return ((a + b) - math.sqrt(8.0 - (a - b) ** 2)) / 2.0


def criterion_closed_forms() -> Criterion:
    errs = []
    for c in (-3.0, 0.0, 0.7, 10.0):
        for solve in (nz.entmax15_bisect, nz.entmax15_sort):
            r = solve([c, c])
            errs.append(max(abs(r.p[0] - 0.5), abs(r.p[1] - 0.5), abs(r.tau - (c - math.sqrt(2.0)))))
    sym = max(errs)
    exact = all(
        np.array_equal(solve([g, 0.0]).p, np.array([1.0, 0.0]))
        for g in (2.5, 3.0, 10.0, 100.0) for solve in (nz.entmax15_bisect, nz.entmax15_sort)
    )
    quad = []
    for a, b in ((1.0, 0.0), (0.3, -0.9), (-2.0, -1.5), (0.0, 1.99)):
        tau = two_element_tau(a, b)
        expect = np.array([((a - tau) / 2) ** 2, ((b - tau) / 2) ** 2])
        r = nz.entmax15_bisect([a, b])
        quad.append(max(float(np.abs(r.p - expect).max()), abs(r.tau - tau)))
    ok = sym < 1e-9 and exact and max(quad) < 1e-9
    return Criterion(4, "closed-form anchors", ok,
                     {"symmetric_err": sym, "saturation_exact": exact, "quadratic_err": max(quad)},
                     "errors < 1e-9, [g,0] -> [1,0] exactly")


def _zero_query(model):
    for i in range(model.config.n_layers):
        model.params[f"blocks.{i}.attn.w_q"][:] = 0.0
        model.params[f"blocks.{i}.attn.b_q"][:] = 0.0
    return model


def criterion_degenerate_agreement() -> Criterion:
    soft = _zero_query(init_model(VitConfig.tiny(), 7))
    ent = with_config(soft, normalizer="entmax15")
    images = make_scenes(4, 32, 8, seed=2).images
    identical = True
    for img in images:
        a = forward_features(soft, img)
        b = forward_features(ent, img)
        identical &= all(np.array_equal(x, y) for x, y in zip(a.layers + [a.final], b.layers + [b.final]))
    return Criterion(5, "softmax/entmax agree with zeroed queries", bool(identical),
                     {"bitwise_identical": bool(identical)}, "bitwise identical outputs")


def criterion_pib() -> Criterion:
    planted, boxes = planted_batch(64, 6, 8, 12, inside=True, seed=11)
    planted_frac = pib(planted, boxes).fractions
    outside, oboxes = planted_batch(64, 6, 8, 12, inside=False, seed=12)
    outside_frac = pib(outside, oboxes).fractions

    grid, cells = 8, 4
    rho = cells * cells / (grid * grid)
    batch, rboxes = random_pib_batch(512, grid, 8, cells, seed=13)
    report = pib(batch, rboxes)
    sigma = math.sqrt(rho * (1 - rho) / 512)
    dev = max(abs(f - rho) for f in report.fractions)

    small, sboxes = batch[:32], rboxes[:32]
    small_report = pib(small, sboxes)
    brute = [brute_force_pib_hits(small, sboxes, l) for l in small_report.layers]
    ok = (all(f == 1.0 for f in planted_frac) and all(f == 0.0 for f in outside_frac)
          and dev <= 3 * sigma and brute == small_report.hits)
    return Criterion(6, "point-in-box correctness", ok,
                     {"planted": planted_frac, "planted_outside": outside_frac,
                      "random": report.fractions, "rho": rho, "three_sigma": round(3 * sigma, 4),
                      "brute_force_hits": brute, "pib_hits": small_report.hits},
                     "planted = 1.0, |PiB - rho| <= 3 sigma, brute-force equality")


def criterion_pca() -> Criterion:
    rng = Rng(21)
    worst = 1.0
    deterministic = True
    for _ in range(10):
        x = rng.normal((64, 16)) * np.linspace(3.0, 0.5, 16)
        ours, _, _ = pca_components(x)
        ref = naive_pca_scores(x)
        for c in range(3):
            worst = min(worst, abs(float(np.corrcoef(ours[:, c], ref[:, c])[0, 1])))
        deterministic &= np.array_equal(pca_rgb(x, (8, 8)), pca_rgb(x.copy(), (8, 8)))
    ok = worst > 0.999 and deterministic
    return Criterion(7, "PCA-RGB vs eigendecomposition oracle", bool(ok),
                     {"min_abs_corr": worst, "deterministic": bool(deterministic)},
                     "|r| > 0.999 per channel, bitwise rerun equality")


def blob_dataset(n: int = 200, d: int = 8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = Rng(seed)
    y = np.arange(n) % 2
    mu = np.zeros(d)
    mu[0] = 3.0
    x = rng.normal((n, d)) * 0.5 + np.where(y[:, None] == 1, mu, -mu)
    return x, y


def linear_depth_dataset(n: int = 256, d: int = 8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = Rng(seed)
    x = rng.normal((n, d))
    w = rng.normal(d) * 0.3
    return x, x @ w + 5.0


def tiny_scene_features(n_images: int = 48, seed: int = 0, normalizer: str = "entmax15"):
    cfg = VitConfig.tiny(normalizer=normalizer)
    model = init_model(cfg, seed)
    scenes = make_scenes(n_images, cfg.image_size, cfg.patch_size, seed=seed + 100)
    return forward_batch(model, scenes.images, scenes.ids), scenes


def criterion_probes() -> Criterion:
    x, y = blob_dataset()
    cls = train_linear_probe(x, y, ProbeTask.CLASSIFICATION, ProbeHyper(lr=0.1, iters=2000, batch=32))
    xd, td = linear_depth_dataset()
    depth = train_linear_probe(xd, td, ProbeTask.DENSE_DEPTH, ProbeHyper(lr=0.05, iters=2000, batch=32))
    batch, scenes = tiny_scene_features()
    feats = stack_layer_set(batch, mode=LayerSet.FINAL)
    dense = train_linear_probe(feats, scenes.masks.reshape(-1), ProbeTask.DENSE_SEG,
                               ProbeHyper(lr=0.05, iters=600, batch=64))
    ok = cls.metric >= 0.99 and depth.metric < 1e-3 and dense.curve[-1] < dense.curve[0]
    return Criterion(8, "probe sanity", ok,
                     {"blob_top1": cls.metric, "linear_depth_rmse": depth.metric,
                      "dense_loss_first": dense.curve[0], "dense_loss_last": dense.curve[-1]},
                     "top-1 >= 0.99, RMSE < 1e-3, dense loss decreases")


def criterion_cls_concat() -> Criterion:
    batch, scenes = tiny_scene_features(n_images=64, seed=1)
    task_batch, labels, _ = global_bit_task(batch, scenes.masks, seed=2)
    hyper = ProbeHyper(lr=0.05, iters=800, batch=64)
    plain = [r.metric for r in layer_sweep(task_batch, labels, False, hyper)]
    with_cls = [r.metric for r in layer_sweep(task_batch, labels, True, hyper)]
    ok = all(c > p for c, p in zip(with_cls, plain))
    return Criterion(9, "CLS concatenation beats patch-only at every layer", ok,
                     {"patch_only_miou": plain, "cls_concat_miou": with_cls},
                     "cls_concat > patch_only at each layer")


def criterion_roundtrip() -> Criterion:
    from .cli import main

    model = init_model(VitConfig.tiny(n_registers=4, normalizer="entmax15"), 3)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        save_model(model, tmp / "a.savt")
        save_model(load_model(tmp / "a.savt"), tmp / "b.savt")
        model_ok = (tmp / "a.savt").read_bytes() == (tmp / "b.savt").read_bytes()
        status = {name: _rerun_status(main, name, tmp) for name in cli_determinism_commands()}
    failed = [name for name, st in status.items() if st == "failed"]
    mismatched = [name for name, st in status.items() if st == "mismatch"]
    ok = model_ok and not failed and not mismatched
    return Criterion(10, "round-trip + CLI determinism", ok,
                     {"model_bytes_identical": model_ok, "failed_commands": failed,
                      "nondeterministic_commands": mismatched},
                     "byte-identical files and outputs, every command exits 0")


# -- CLI determinism -------------------------------------------------------


def cli_determinism_commands() -> dict[str, list[str]]:
    """Subcommand name -> argv template; {d} is the run directory, {w}/{f} shared inputs."""
    return {
        "normalize": ["normalize", "--input", "{w}/logits.csv", "--normalizer", "entmax15", "--cross-check"],
        "model init": ["--seed", "4", "model", "init", "--preset", "tiny", "--normalizer", "entmax15",
                       "--out", "{d}/m.savt"],
        "model forward": ["model", "forward", "--weights", "{w}/m.savt", "--zeros", "--out", "{d}/f.savt"],
        "model dump-features": ["--seed", "5", "model", "dump-features", "--weights", "{w}/m.savt",
                                "--synthetic", "12", "--out", "{d}/f.savt"],
        "analyze pib": ["analyze", "pib", "--features", "{w}/f.savt"],
        "analyze pca": ["analyze", "pca", "--features", "{w}/f.savt", "--out", "{d}/pca.ppm"],
        "analyze sim": ["analyze", "sim", "--features", "{w}/f.savt", "--layer", "1", "--out", "{d}/sim.ppm"],
        "analyze support": ["analyze", "support", "--weights", "{w}/m.savt", "--synthetic", "2"],
        "probe cls": ["probe", "cls", "--features", "{w}/f.savt", "--iters", "50", "--lr-grid", "0.01,0.1"],
        "probe dense": ["probe", "dense", "--features", "{w}/f.savt", "--iters", "50"],
        "probe depth": ["probe", "depth", "--features", "{w}/f.savt", "--iters", "50"],
        "probe layer-sweep": ["probe", "layer-sweep", "--features", "{w}/f.savt", "--iters", "50",
                              "--global-bit"],
    }


def _prepare_shared(main, shared: Path) -> None:
    if (shared / "f.savt").exists():
        return
    shared.mkdir(parents=True, exist_ok=True)
    (shared / "logits.csv").write_text("0,0\n10,0\n1,0,-1\n0.3,2,2,-1\n")
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        main(["--seed", "1", "model", "init", "--preset", "tiny", "--normalizer", "entmax15",
              "--out", str(shared / "m.savt")])
        main(["--seed", "2", "model", "dump-features", "--weights", str(shared / "m.savt"),
              "--synthetic", "12", "--out", str(shared / "f.savt")])


def _rerun_status(main, name: str, tmp: Path) -> str:
    """'ok', 'failed' (nonzero exit) or 'mismatch' (two runs differ)."""
    shared = tmp / "shared"
    _prepare_shared(main, shared)
    outputs = []
    for run in ("run1", "run2"):
        d = tmp / name.replace(" ", "_") / run
        d.mkdir(parents=True, exist_ok=True)
        argv = [a.format(d=d, w=shared) for a in cli_determinism_commands()[name]]
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
            code = main(argv)
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        outputs.append((code, buf.getvalue().replace(str(d), "<dir>"), files))
    if any(code != 0 for code, _, _ in outputs):
        return "failed"
    return "ok" if outputs[0] == outputs[1] else "mismatch"


# -- driver ----------------------------------------------------------------

CRITERIA: list[tuple[Callable[[], Criterion], float | None]] = [
    (criterion_simplex_sparsity, 10.0),
    (criterion_solver_equivalence, 10.0),
    (criterion_gradients, 30.0),
    (criterion_closed_forms, None),
    (criterion_degenerate_agreement, None),
    (criterion_pib, 20.0),
    (criterion_pca, None),
    (criterion_probes, 60.0),
    (criterion_cls_concat, None),
    (criterion_roundtrip, None),
]

TOTAL_BUDGET = 180.0


@dataclass
class Summary:
    criteria: list[Criterion] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def to_dict(self, timings: bool = False) -> dict:
        d = {"passed": self.passed, "criteria": [c.to_dict(timings) for c in self.criteria]}
        if timings:
            d["seconds"] = round(self.seconds, 3)
        return d


def run_all(only: set[int] | None = None, tau_fault: float | None = None) -> Summary:
    summary = Summary()
    t0 = time.perf_counter()
    ctx = nz.inject_tau_fault(tau_fault) if tau_fault else contextlib.nullcontext()
    with ctx:
        for idx, (fn, budget) in enumerate(CRITERIA, start=1):
            if only and idx not in only:
                continue
            crit = _timed(fn, budget)
            crit.id = idx
            summary.criteria.append(crit)
    summary.seconds = time.perf_counter() - t0
    return summary
