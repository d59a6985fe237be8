"""Command-line entry point: ``savt <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
deterministic for a given ``--seed``; JSON is emitted with sorted keys and
no timestamps.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import normalizers as nz
from .analysis import (
    BoxAnnotation,
    CLS_LR_GRID,
    ProbeHyper,
    ProbeTask,
    cls_patch_similarity,
    global_bit_task,
    layer_sweep,
    make_scenes,
    pca_rgb,
    pib,
    train_linear_probe,
)
from .analysis.imageio import read_ppm, write_ppm
from .container import ContainerError
from .vit import (
    LayerSet,
    VitConfig,
    forward_batch,
    init_model,
    load_features,
    load_model,
    save_features,
    save_model,
    stack_layer_set,
    with_config,
)


class UsageError(Exception):
    """Bad flags or unparseable input; exit code 2."""


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- config handling -------------------------------------------------------

_FIELD_TYPES = {"int": int, "float": float, "str": str}


def read_config_file(path: str) -> dict:
    """Parse ``key=value`` lines (``#`` comments) into VitConfig overrides."""
    types = {f.name: f.type for f in fields(VitConfig)}
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        cast = _FIELD_TYPES.get(str(types[key]), str)
        try:
            out[key] = cast(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def build_config(args) -> VitConfig:
    overrides = read_config_file(args.config_file) if args.config_file else {}
    if args.normalizer:
        overrides["normalizer"] = args.normalizer
    if args.registers is not None:
        overrides["n_registers"] = args.registers
    try:
        return VitConfig.tiny(**overrides) if args.preset == "tiny" else VitConfig.vit_s(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


# -- normalize -------------------------------------------------------------


def parse_logit_rows(path: str) -> list[np.ndarray]:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    if path.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, list):
            raise UsageError(f"{path}: line 1: expected a list of rows")
        rows = []
        for i, row in enumerate(data, start=1):
            try:
                arr = np.asarray(row, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}: row {i}: not numeric") from exc
            if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
                raise UsageError(f"{path}: row {i}: expected a nonempty list of finite numbers")
            rows.append(arr)
        return rows
    rows = []
    for lineno, fields_ in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not fields_ or all(not f.strip() for f in fields_):
            continue
        try:
            arr = np.array([float(f) for f in fields_])
        except ValueError as exc:
            raise UsageError(f"{path}: line {lineno}: cannot parse {','.join(fields_)!r}") from exc
        if not np.all(np.isfinite(arr)):
            raise UsageError(f"{path}: line {lineno}: non-finite value")
        rows.append(arr)
    return rows


def cmd_normalize(args) -> int:
    rows = parse_logit_rows(args.input)
    results = []
    worst = 0.0
    for z in rows:
        if args.normalizer == "softmax":
            r = nz.softmax(z)
            tau = None
        else:
            r = nz.entmax15_sort(z) if args.solver == "sort" else nz.entmax15_bisect(z)
            tau = r.tau
        item = {"p": r.p.tolist(), "tau": tau, "support_size": r.support_size}
        if args.cross_check and args.normalizer == "entmax15":
            a, b = nz.entmax15_sort(z), nz.entmax15_bisect(z)
            diff = float(np.abs(a.p - b.p).max())
            worst = max(worst, diff)
            item["cross_check_diff"] = diff
        results.append(item)
    report = {"normalizer": args.normalizer, "solver": args.solver, "rows": results}
    if args.cross_check and args.normalizer == "entmax15":
        report["cross_check"] = {"max_abs_diff": worst, "tolerance": 1e-9, "passed": worst < 1e-9}
    _emit(report, args.output)
    if args.cross_check and worst >= 1e-9:
        print(f"cross-check failed: max |sort - bisect| = {worst}", file=sys.stderr)
        return 1
    return 0


# -- model -----------------------------------------------------------------


def _load_images(args, cfg: VitConfig):
    """Returns (images, ids, scenes-or-None)."""
    if getattr(args, "synthetic", None):
        scenes = make_scenes(args.synthetic, cfg.image_size, cfg.patch_size, seed=args.seed,
                             n_classes=args.classes)
        return list(scenes.images), scenes.ids, scenes
    if getattr(args, "zeros", False):
        return [np.zeros((cfg.image_size, cfg.image_size, 3))], ["zeros"], None
    paths = getattr(args, "image", None) or []
    if not paths:
        raise UsageError("no input images: pass --image, --zeros or --synthetic")
    images = []
    for p in paths:
        img = np.load(p) if p.endswith(".npy") else read_ppm(p)
        images.append(np.asarray(img, dtype=np.float64))
    return images, [Path(p).stem for p in paths], None


def _model_from_args(args):
    model = load_model(args.weights)
    if getattr(args, "normalizer", None):
        model = with_config(model, normalizer=args.normalizer)
    return model


def _scene_extras(scenes) -> dict:
    return {
        "boxes": np.array([b.box for b in scenes.boxes], dtype=np.float64),
        "masks": scenes.masks,
        "depth": scenes.depth,
        "labels": scenes.labels,
    }


def cmd_model(args) -> int:
    if args.action == "init":
        cfg = build_config(args)
        model = init_model(cfg, args.seed)
        save_model(model, args.out, dtype=args.dtype)
        _emit({"config": cfg.to_dict(), "n_tokens": cfg.n_tokens, "param_count": model.param_count,
               "out": str(args.out)})
        return 0

    model = _model_from_args(args)
    cfg = model.config
    images, ids, scenes = _load_images(args, cfg)
    if args.action == "forward" and len(images) != 1:
        raise UsageError("forward takes exactly one image; use dump-features for batches")
    batch = forward_batch(model, images, ids, threads=args.threads)
    extras = _scene_extras(scenes) if scenes is not None else None
    if args.out:
        save_features(args.out, batch, extras, {"config": cfg.to_dict()})
    _emit({
        "images": len(batch),
        "n_layers": cfg.n_layers,
        "n_tokens": batch[0].n_tokens,
        "d_model": cfg.d_model,
        "normalizer": cfg.normalizer.value,
        "final_cls_norm": [float(np.linalg.norm(f.final[0])) for f in batch],
        "out": str(args.out) if args.out else None,
    })
    return 0


# -- analyze ---------------------------------------------------------------


def _layer_arg(value: str):
    if value == "final":
        return "final"
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer must be an integer or 'final', got {value!r}")


def _boxes_for(batch, extras, boxes_path):
    if boxes_path:
        data = json.loads(Path(boxes_path).read_text())
        return [BoxAnnotation(d["image_id"], tuple(d["box"])) for d in data]
    if "boxes" not in extras:
        raise UsageError("features file has no boxes; pass --boxes")
    return [BoxAnnotation(f.image_id, tuple(float(v) for v in b)) for f, b in zip(batch, extras["boxes"])]


def _pick_image(batch, index: int):
    if not 0 <= index < len(batch):
        raise UsageError(f"--image-index {index} out of range 0..{len(batch) - 1}")
    return batch[index]


def cmd_analyze(args) -> int:
    if args.action == "support":
        model = _model_from_args(args)
        images, ids, _ = _load_images(args, model.config)
        batch = forward_batch(model, images, ids, threads=args.threads, return_attention=True)
        per_layer = []
        for l in range(model.config.n_layers):
            stats = nz.support_stats(np.stack([f.attention[l] for f in batch]))
            per_layer.append(dict(stats.to_dict(), layer=l + 1))
        _emit({"normalizer": model.config.normalizer.value, "layers": per_layer})
        return 0

    batch, extras, _ = load_features(args.features)
    if args.action == "pib":
        report = pib(batch, _boxes_for(batch, extras, args.boxes))
        _emit(report.to_dict(), args.out)
    elif args.action == "pca":
        f = _pick_image(batch, args.image_index)
        rgb = pca_rgb(f.patches(args.layer), f.grid)
        write_ppm(args.out, rgb, upscale=args.upscale)
        _emit({"grid": list(f.grid), "shape": list(rgb.shape), "layer": args.layer, "out": str(args.out)})
    elif args.action == "sim":
        f = _pick_image(batch, args.image_index)
        sim = cls_patch_similarity(f, args.layer)
        if args.out:
            write_ppm(args.out, (sim + 1.0) / 2.0, upscale=args.upscale)
        _emit({"layer": args.layer, "grid": list(f.grid), "similarity": sim.tolist()})
    return 0


# -- probe -----------------------------------------------------------------


def _report(report, hyper: ProbeHyper, **extra) -> dict:
    return dict(report.to_dict(), hyper=asdict(hyper), **extra)


def _hyper(args, grid=None) -> ProbeHyper:
    try:
        return ProbeHyper(lr=args.lr, iters=args.iters, batch=args.batch, seed=args.seed, lr_grid=grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _lr_grid(text: str) -> list[float]:
    if text == "default":
        return list(CLS_LR_GRID)
    try:
        grid = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad learning-rate list {text!r}")
    if any(not v > 0 for v in grid):
        raise argparse.ArgumentTypeError("learning rates must be positive")
    return grid


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {value}")
    return value


def _split_index(n: int, fraction: float) -> int:
    k = int(round(n * fraction))
    if not 0 < k < n:
        raise UsageError(f"--train-fraction {fraction} leaves an empty split for {n} images")
    return k


def cmd_probe(args) -> int:
    batch, extras, _ = load_features(args.features)
    k = _split_index(len(batch), args.train_fraction)
    if args.action == "dense" and args.layer_sweep:
        args.action = "layer-sweep"
    needed = {"cls": "labels", "dense": "masks", "depth": "depth", "layer-sweep": "masks"}[args.action]
    if needed not in extras:
        raise UsageError(f"features file lacks '{needed}' targets (dump with --synthetic)")
    targets = extras[needed]

    if args.action == "cls":
        feats = np.stack([f.final[0] for f in batch])
        hyper = _hyper(args, args.lr_grid)
        report = train_linear_probe(feats[:k], targets[:k], ProbeTask.CLASSIFICATION, hyper,
                                    eval_features=feats[k:], eval_targets=targets[k:])
        _emit(_report(report, hyper), args.out)
        return 0

    if args.action in ("dense", "depth"):
        if getattr(args, "global_bit", False):
            raise UsageError("--global-bit applies to layer sweeps only")
        mode = LayerSet(args.layer_set)
        kw = dict(mode=mode, concat_cls=args.concat_cls, layer=args.layer)
        task = ProbeTask.DENSE_SEG if args.action == "dense" else ProbeTask.DENSE_DEPTH
        y = targets.reshape(len(batch), -1)
        try:
            x_train, x_eval = stack_layer_set(batch[:k], **kw), stack_layer_set(batch[k:], **kw)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        n_classes = int(targets.max()) + 1 if task is ProbeTask.DENSE_SEG else None
        hyper = _hyper(args)
        report = train_linear_probe(x_train, y[:k].reshape(-1), task, hyper,
                                    eval_features=x_eval, eval_targets=y[k:].reshape(-1),
                                    n_classes=n_classes)
        _emit(_report(report, hyper, layer_set=mode.value, concat_cls=args.concat_cls), args.out)
        return 0

    labels = targets
    if args.global_bit:
        batch, labels, _ = global_bit_task(batch, targets, seed=args.seed)
    hyper = _hyper(args)
    curves = {}
    reports = {}
    for name, concat in (("patch_only", False), ("cls_concat", True)):
        reps = layer_sweep(batch, labels, concat, hyper, train_fraction=args.train_fraction)
        curves[name] = [r.metric for r in reps]
        reports[name] = [r.to_dict() for r in reps]
    _emit({"layers": list(range(1, batch[0].n_layers + 1)), "metric": "miou", "curves": curves,
           "hyper": asdict(hyper),
           "reports": reports, "global_bit": args.global_bit}, args.out)
    return 0


# -- accept ----------------------------------------------------------------


def cmd_accept(args) -> int:
    from .acceptance import run_all

    only = {int(v) for v in args.only.split(",")} if args.only else None
    fault = 0.05 if args.inject_fault == "tau" else None
    summary = run_all(only=only, tau_fault=fault)
    for crit in summary.criteria:
        line = crit.line()
        if args.timings:
            line += f" [{crit.seconds:.1f}s]"
        print(line)
    print("ALL PASS" if summary.passed else
          "FAILED: " + ", ".join(f"{c.id}. {c.name}" for c in summary.criteria if not c.passed))
    if args.json:
        _emit(summary.to_dict(args.timings), args.json)
    return 0 if summary.passed else 1


# -- parser ----------------------------------------------------------------


def _default_threads() -> int:
    raw = os.environ.get("SAVT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="savt", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help="cap on worker threads (default: $SAVT_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="apply softmax or entmax-1.5 to logit rows")
    p.add_argument("--input", required=True, help="CSV (one row per line) or JSON list; '-' for stdin")
    p.add_argument("--normalizer", choices=["softmax", "entmax15"], default="entmax15")
    p.add_argument("--solver", choices=["bisect", "sort"], default="sort")
    p.add_argument("--cross-check", action="store_true", help="compare sort and bisect solvers")
    p.add_argument("--output")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("model", help="initialize a model or extract features")
    msub = p.add_subparsers(dest="action", required=True)
    q = msub.add_parser("init")
    q.add_argument("--preset", choices=["tiny", "vit-s"], default="tiny")
    q.add_argument("--config-file", "--config", dest="config_file", help="key=value config overrides")
    q.add_argument("--normalizer", choices=["softmax", "entmax15"])
    q.add_argument("--registers", type=int)
    q.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    q.add_argument("--out", required=True)
    for action in ("forward", "dump-features"):
        q = msub.add_parser(action)
        q.add_argument("--weights", required=True)
        q.add_argument("--normalizer", choices=["softmax", "entmax15"])
        q.add_argument("--image", action="append", help="PPM or .npy image (repeatable)")
        q.add_argument("--zeros", action="store_true", help="use one all-zero image")
        q.add_argument("--synthetic", type=_positive_int, help="generate N seeded synthetic scenes")
        q.add_argument("--classes", type=_positive_int, default=2)
        q.add_argument("--out")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("analyze", help="PiB, PCA-RGB, CLS similarity, attention support")
    asub = p.add_subparsers(dest="action", required=True)
    q = asub.add_parser("pib")
    q.add_argument("--features", required=True)
    q.add_argument("--boxes", help="JSON list of {image_id, box}")
    q.add_argument("--out")
    q = asub.add_parser("pca")
    q.add_argument("--features", required=True)
    q.add_argument("--image-index", type=int, default=0)
    q.add_argument("--layer", type=_layer_arg, default="final")
    q.add_argument("--upscale", type=_positive_int, default=1)
    q.add_argument("--out", required=True)
    q = asub.add_parser("sim")
    q.add_argument("--features", required=True)
    q.add_argument("--image-index", type=int, default=0)
    q.add_argument("--layer", type=_layer_arg, default="final")
    q.add_argument("--upscale", type=_positive_int, default=1)
    q.add_argument("--out")
    q = asub.add_parser("support")
    q.add_argument("--weights", required=True)
    q.add_argument("--normalizer", choices=["softmax", "entmax15"])
    q.add_argument("--image", action="append")
    q.add_argument("--zeros", action="store_true")
    q.add_argument("--synthetic", type=_positive_int)
    q.add_argument("--classes", type=_positive_int, default=2)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("probe", help="linear probes on a features dump")
    psub = p.add_subparsers(dest="action", required=True)
    for action in ("cls", "dense", "depth", "layer-sweep"):
        q = psub.add_parser(action)
        q.add_argument("--features", required=True)
        q.add_argument("--iters", type=_positive_int, default=500)
        q.add_argument("--lr", type=_positive_float, default=0.05)
        q.add_argument("--batch", type=_positive_int, default=64)
        q.add_argument("--train-fraction", type=_fraction, default=0.75)
        q.add_argument("--out")
        if action == "cls":
            q.add_argument("--lr-grid", type=_lr_grid, help="comma-separated rates, or 'default' for the full grid")
        if action in ("dense", "depth"):
            q.add_argument("--layer-set", choices=[m.value for m in LayerSet], default="final")
            q.add_argument("--layer", type=int)
            q.add_argument("--concat-cls", action="store_true")
        if action == "dense":
            q.add_argument("--layer-sweep", action="store_true", help="same as the layer-sweep command")
        if action in ("dense", "layer-sweep"):
            q.add_argument("--global-bit", action="store_true",
                           help="relabel foreground by a per-image bit written only into CLS")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("accept", help="run the acceptance suite")
    p.add_argument("--json", help="write the machine-readable summary here")
    p.add_argument("--only", help="comma-separated criterion ids")
    p.add_argument("--timings", action="store_true", help="include wall-clock times")
    p.add_argument("--inject-fault", choices=["tau"], help="negative control: corrupt the entmax threshold")
    p.set_defaults(func=cmd_accept)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("savt: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"savt: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, ValueError, ArithmeticError, OSError, KeyError, IndexError) as exc:
        print(f"savt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
