"""Command-line entry point: ``shrimpxnet <command> ...``.

Exit codes: 0 success, 2 input or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adversarial import DEFAULT_EPSILONS, robustness_sweep, sweep_table
from .data import (BG_MODES, DEFAULT_CUTOFF, apply_manifest, generate_synthetic, load_dataset, read_manifest,
                   split, stack, write_image_tree, write_manifest)
from .errors import CheckpointError, ConfigError, DataError
from .explain import METHODS, compute_cam, overlay_name, render_overlay, save_heatmap_text
from .metrics import build_report
from .model import BlockSpec, ModelSpec, load_checkpoint, predict_proba, save_checkpoint
from .trainer import (MODEL_DEFAULTS, TrainConfig, coerce, grid_search, grid_table, load_config, split_values,
                      train, with_values)

log = logging.getLogger("shrimpxnet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULTS = TrainConfig()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root):
    """Digest over relative paths and contents of every image under ``root``."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode("utf-8") + b"\0")
            h.update(sha256_file(p).encode("ascii"))
    return h.hexdigest()


def write_run_manifest(out, manifest):
    manifest.finished = _now()
    manifest.outputs = sorted(str(p.relative_to(out)) for p in Path(out).rglob("*") if p.is_file()
                              and p.name != "manifest.json")
    (Path(out) / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n", encoding="utf-8")


# --- prepared data ------------------------------------------------------------

def load_prepared(prep_dir):
    """Reload the dataset behind a ``prepare`` output directory as a DatasetSplit."""
    prep_dir = Path(prep_dir)
    info_path = prep_dir / "preprocess.json"
    if not info_path.is_file():
        raise DataError(f"{prep_dir} is not a prepared data directory (missing preprocess.json); run `prepare` first")
    info = json.loads(info_path.read_text(encoding="utf-8"))
    samples, class_names = load_dataset(info["source"], info["size"], info["bg"], info["cutoff"])
    if class_names != info["class_names"]:
        raise DataError(f"class folders under {info['source']} changed since prepare: {class_names}")
    splits = apply_manifest(samples, class_names, read_manifest(prep_dir / "split.tsv"), info["seed"])
    return splits, info


def _prepared_inputs(prep_dir):
    prep_dir = Path(prep_dir)
    return {str(prep_dir / "split.tsv"): sha256_file(prep_dir / "split.tsv"),
            str(prep_dir / "preprocess.json"): sha256_file(prep_dir / "preprocess.json")}


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------

def cmd_synth(args):
    out = _out_dir(args.out)
    manifest = RunManifest("synth", vars_clean(args), {}, args.seed, started=_now())
    samples, names = generate_synthetic(args.per_class, args.classes, args.size, args.seed, args.background)
    write_image_tree(samples, names, out)
    write_run_manifest(out, manifest)
    print(f"wrote {len(samples)} images in {len(names)} classes to {out}")


def cmd_prepare(args):
    src = Path(args.data)
    if not src.is_dir():
        raise DataError(f"dataset directory not found: {src}")
    out = _out_dir(args.out)
    manifest = RunManifest("prepare", vars_clean(args), {str(src): sha256_tree(src)}, args.seed, started=_now())
    samples, class_names = load_dataset(src, tuple(args.size), args.bg, args.cutoff)
    parts = split(samples, args.seed, class_names)
    write_manifest(parts, out / "split.tsv")
    (out / "classes.txt").write_text("".join(n + "\n" for n in class_names), encoding="utf-8")
    counts = {name: sum(1 for s in samples if s.label == k) for k, name in enumerate(class_names)}
    pixels = np.stack([s.image for s in samples])
    info = {
        "source": str(src.resolve()),
        "size": list(args.size),
        "bg": args.bg,
        "cutoff": args.cutoff,
        "seed": args.seed,
        "class_names": class_names,
        "class_counts": counts,
        "split_sizes": {"train": len(parts.train), "validation": len(parts.validation), "test": len(parts.test)},
        "pixel_mean": [round(float(v), 6) for v in pixels.mean(axis=(0, 2, 3))],
        "pixel_std": [round(float(v), 6) for v in pixels.std(axis=(0, 2, 3))],
    }
    (out / "preprocess.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    write_run_manifest(out, manifest)
    print(f"{len(samples)} images, classes {class_names}: "
          f"train {len(parts.train)} / validation {len(parts.validation)} / test {len(parts.test)}")


FLAG_KEYS = {
    "mixup_alpha": "mixup_alpha",
    "cutmix_alpha": "cutmix_alpha",
    "fgsm_eps": "fgsm_epsilon",
    "adv_fraction": "adv_fraction",
    "freeze": "freeze_depth",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "initial_lr",
    "seed": "seed",
}


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    values = load_config(args.config) if args.config else {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    return split_values(values)


def build_spec(model_opts, info):
    blocks = tuple(BlockSpec(f, model_opts["kernel_size"], 1, model_opts["pool"]) for f in model_opts["filters"])
    try:
        return ModelSpec(blocks=blocks, head_hidden_width=model_opts["head_hidden_width"],
                         dropout_rate=model_opts["dropout_rate"], num_classes=len(info["class_names"]),
                         input_size=tuple(info["size"]))
    except ValueError as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from None


def _write_training_outputs(out, result, class_names):
    result.checkpoint.meta["class_names"] = list(class_names)
    save_checkpoint(result.checkpoint, out / "checkpoint.sxn")
    (out / "history.log").write_text(result.history.log_text(), encoding="utf-8")
    if result.history.augment_log:
        (out / "augment.log").write_text(result.history.augment_text(), encoding="utf-8")


def cmd_train(args):
    config, model_opts = resolve_config(args)
    splits, info = load_prepared(args.data)
    spec = build_spec(model_opts, info)
    out = _out_dir(args.out)
    inputs = _prepared_inputs(args.data)
    if args.config:
        inputs[str(args.config)] = sha256_file(args.config)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        inputs[str(args.resume)] = sha256_file(args.resume)
        _check_compatible(resume, spec, info)
    resolved = {**config.flat(), **model_opts, "input_size": list(spec.input_size)}
    manifest = RunManifest("train", _jsonable(resolved), inputs, config.seed, started=_now())
    result = train(config, spec, splits, resume=resume, on_epoch=lambda r: print(r.log_line(), flush=True))
    _write_training_outputs(out, result, info["class_names"])
    write_run_manifest(out, manifest)
    best = result.history.epochs[result.history.best_epoch] if result.history.best_epoch >= 0 else None
    if best is not None:
        print(f"best epoch {best.epoch}: val_loss {best.val_loss:.6f} val_acc {best.val_acc:.6f}")


def parse_grid(items):
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        values = [v for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid axis {key!r} has no values")
        if key in MODEL_DEFAULTS:
            raise ConfigError(f"grid axis {key!r} is a model option; only training keys can be searched")
        grid[key] = [coerce(key, v) for v in values]
    return grid


def cmd_gridsearch(args):
    config, model_opts = resolve_config(args)
    grid = parse_grid(args.grid)
    splits, info = load_prepared(args.data)
    spec = build_spec(model_opts, info)
    out = _out_dir(args.out)
    inputs = _prepared_inputs(args.data)
    if args.config:
        inputs[str(args.config)] = sha256_file(args.config)
    resolved = {**config.flat(), **model_opts, "grid": {k: list(v) for k, v in grid.items()}}
    manifest = RunManifest("gridsearch", _jsonable(resolved), inputs, config.seed, started=_now())
    results, best_config = grid_search(grid, config, spec, splits, keep_results=True)
    (out / "grid.tsv").write_text(grid_table(results), encoding="utf-8")
    if results[0].result is not None:
        best_dir = _out_dir(out / "best")
        _write_training_outputs(best_dir, results[0].result, info["class_names"])
    write_run_manifest(out, manifest)
    print(grid_table(results), end="")


def _check_compatible(ckpt, spec_or_none, info):
    spec = ckpt.spec
    if spec.num_classes != len(info["class_names"]) or list(spec.input_size) != list(info["size"]):
        raise CheckpointError(
            f"checkpoint expects {spec.num_classes} classes at {spec.input_size[0]}x{spec.input_size[1]}, "
            f"prepared data has {len(info['class_names'])} classes at {info['size'][0]}x{info['size'][1]}")
    names = ckpt.meta.get("class_names")
    if names is not None and names != info["class_names"]:
        raise CheckpointError(f"checkpoint classes {names} differ from prepared classes {info['class_names']}")
    if spec_or_none is not None and spec_or_none != spec:
        raise CheckpointError("checkpoint model spec differs from the configured model")


def _load_for_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    splits, info = load_prepared(args.data)
    _check_compatible(ckpt, None, info)
    inputs = {**_prepared_inputs(args.data), str(args.checkpoint): sha256_file(args.checkpoint)}
    return ckpt, splits, info, inputs


def _evaluate(ckpt, splits, args):
    x, y = stack(splits.by_name(args.split))
    probs = predict_proba(ckpt.spec, ckpt.params, x)
    return build_report(probs, y, splits.class_names, args.bootstrap, args.seed), x, y


def cmd_evaluate(args):
    ckpt, splits, info, inputs = _load_for_eval(args)
    out = _out_dir(args.out)
    manifest = RunManifest("evaluate", vars_clean(args), inputs, args.seed, started=_now())
    report, _, _ = _evaluate(ckpt, splits, args)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.text_table(), encoding="utf-8")
    write_run_manifest(out, manifest)
    print(report.text_table(), end="")


def parse_eps_list(raw):
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--eps-list must be comma-separated numbers, got {raw!r}") from None
    if not values or values[0] != 0 or values != sorted(values):
        raise ConfigError("--eps-list must be ascending and start at 0")
    return values


def _sweep(ckpt, splits, args):
    x, y = stack(splits.by_name(args.split))
    xv, yv = stack(splits.validation)
    return robustness_sweep(ckpt.spec, ckpt.params, x, y, parse_eps_list(args.eps_list), validation=(xv, yv))


def _sweep_json(rows):
    return [{"epsilon": r.epsilon, "accuracy": round(r.accuracy, 6), "loss": round(r.loss, 6),
             "val_loss": None if r.val_loss is None else round(r.val_loss, 6)} for r in rows]


def cmd_attack(args):
    ckpt, splits, info, inputs = _load_for_eval(args)
    out = _out_dir(args.out)
    manifest = RunManifest("attack", vars_clean(args), inputs, 0, started=_now())
    rows = _sweep(ckpt, splits, args)
    (out / "attack.tsv").write_text(sweep_table(rows), encoding="utf-8")
    (out / "attack.json").write_text(json.dumps(_sweep_json(rows), indent=2) + "\n", encoding="utf-8")
    write_run_manifest(out, manifest)
    print(sweep_table(rows), end="")


def _explain_targets(splits, args):
    pool = splits.by_name(args.split)
    if args.image is not None:
        matches = [s for s in splits.train + splits.validation + splits.test if s.source_id == args.image]
        if not matches:
            raise DataError(f"image {args.image!r} is not in the prepared dataset")
        return matches
    return pool[:args.count]


def _class_index(name, class_names):
    if name is None:
        return None
    if name not in class_names:
        raise DataError(f"unknown class {name!r}; valid classes: {', '.join(class_names)}")
    return class_names.index(name)


def _explain(ckpt, splits, args, out):
    methods = METHODS if args.method == "all" else (args.method,)
    forced = _class_index(args.class_name, splits.class_names)
    written = []
    for sample in _explain_targets(splits, args):
        probs = predict_proba(ckpt.spec, ckpt.params, sample.image[None])[0]
        target = int(probs.argmax()) if forced is None else forced
        cls = splits.class_names[target]
        for method in methods:
            heat = compute_cam(ckpt.spec, ckpt.params, sample.image, target, method)
            path = out / overlay_name(sample.source_id, method, cls)
            render_overlay(heat, sample.image, path)
            if args.dump_raw:
                save_heatmap_text(heat, path.with_suffix(".txt"))
            written.append(path.name)
    return written


def cmd_explain(args):
    ckpt, splits, info, inputs = _load_for_eval(args)
    out = _out_dir(args.out)
    manifest = RunManifest("explain", vars_clean(args), inputs, 0, started=_now())
    for name in _explain(ckpt, splits, args, out):
        print(name)
    write_run_manifest(out, manifest)


def cmd_report(args):
    ckpt, splits, info, inputs = _load_for_eval(args)
    out = _out_dir(args.out)
    manifest = RunManifest("report", vars_clean(args), inputs, args.seed, started=_now())
    report, _, _ = _evaluate(ckpt, splits, args)
    rows = _sweep(ckpt, splits, args)
    report.extra["robustness"] = _sweep_json(rows)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.text_table() + "\n" + sweep_table(rows), encoding="utf-8")
    (out / "attack.tsv").write_text(sweep_table(rows), encoding="utf-8")
    _explain(ckpt, splits, args, _out_dir(out / "heatmaps"))
    write_run_manifest(out, manifest)
    print(report.text_table(), end="")
    print(sweep_table(rows), end="")


def vars_clean(args):
    return _jsonable({k: v for k, v in vars(args).items() if k not in ("func", "verbose")})


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = _jsonable(v)
        out[k] = v
    return out


# --- parser -------------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--config", help="flat key=value config file (default: none; built-in defaults apply)")
    p.add_argument("--data", required=True, help="directory written by `prepare` (default: required)")
    p.add_argument("--out", required=True, help="output directory (default: required)")
    p.add_argument("--mixup-alpha", type=float, help=f"MixUp Beta alpha, 0 disables (default: {DEFAULTS.augment.mixup_alpha})")
    p.add_argument("--cutmix-alpha", type=float, help=f"CutMix Beta alpha, 0 disables (default: {DEFAULTS.augment.cutmix_alpha})")
    p.add_argument("--fgsm-eps", type=float, help=f"FGSM epsilon for adversarial training, 0 disables (default: {DEFAULTS.attack.epsilon})")
    p.add_argument("--adv-fraction", type=float, help=f"fraction of each batch replaced by FGSM examples (default: {DEFAULTS.attack.adversarial_fraction})")
    p.add_argument("--freeze", type=int, help=f"number of leading backbone blocks to freeze (default: {DEFAULTS.freeze_depth})")
    p.add_argument("--epochs", type=int, help=f"maximum epochs (default: {DEFAULTS.epochs})")
    p.add_argument("--batch-size", type=int, help=f"batch size (default: {DEFAULTS.batch_size})")
    p.add_argument("--lr", type=float, help=f"initial learning rate (default: {DEFAULTS.initial_lr})")
    p.add_argument("--seed", type=int, help=f"random seed (default: {DEFAULTS.seed})")


def _add_eval_flags(p, bootstrap=False, sweep=False, cam=False):
    p.add_argument("--checkpoint", required=True, help="checkpoint written by `train` (default: required)")
    p.add_argument("--data", required=True, help="directory written by `prepare` (default: required)")
    p.add_argument("--out", required=True, help="output directory (default: required)")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test", help="split to use (default: test)")
    if bootstrap:
        p.add_argument("--bootstrap", type=int, default=1000, help="bootstrap iterations (default: 1000)")
        p.add_argument("--seed", type=int, default=0, help="bootstrap seed (default: 0)")
    if sweep:
        p.add_argument("--eps-list", default=",".join(str(e) for e in DEFAULT_EPSILONS),
                       help="comma-separated ascending epsilons starting at 0 (default: %(default)s)")
    if cam:
        p.add_argument("--method", choices=METHODS + ("all",), default="all", help="CAM variant (default: all)")
        p.add_argument("--image", help="source id of the image to explain, e.g. WSSV/img_01.png "
                                       "(default: first --count images of --split)")
        p.add_argument("--class", dest="class_name", help="class to explain (default: predicted class)")
        p.add_argument("--count", type=int, default=1, help="images to explain when --image is absent (default: 1)")
        p.add_argument("--dump-raw", action="store_true", help="also write the raw heatmap as text (default: off)")


def build_parser():
    parser = argparse.ArgumentParser(prog="shrimpxnet", description="Shrimp disease classification pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic class-folder image dataset")
    p.add_argument("--out", required=True, help="output dataset root (default: required)")
    p.add_argument("--per-class", type=int, default=200, help="images per class (default: %(default)s)")
    p.add_argument("--classes", type=int, default=4, help="number of classes, at most 8 (default: %(default)s)")
    p.add_argument("--size", type=int, default=64, help="square image size in pixels (default: %(default)s)")
    p.add_argument("--background", type=float, default=0.0, help="background gray level (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="load, mask, resize and split a class-folder dataset")
    p.add_argument("--data", required=True, help="dataset root with one folder per class (default: required)")
    p.add_argument("--out", required=True, help="output directory (default: required)")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=[128, 128], help="resize target (default: 128 128)")
    p.add_argument("--bg", choices=BG_MODES, default="none", help="background removal mode (default: %(default)s)")
    p.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF, help="luminance cutoff for --bg threshold (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="split seed (default: %(default)s)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    _add_training_flags(p)
    p.add_argument("--resume", help="checkpoint to resume training from (default: none)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="grid search over training options")
    _add_training_flags(p)
    p.add_argument("--grid", action="append", default=[], required=True,
                   help="axis as key=v1,v2,... (repeatable), e.g. freeze_depth=0,2 (default: required)")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    _add_eval_flags(p, bootstrap=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", help="FGSM epsilon sweep")
    _add_eval_flags(p, sweep=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("explain", help="CAM heatmap overlays")
    _add_eval_flags(p, cam=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="evaluate + attack + explain into one directory")
    _add_eval_flags(p, bootstrap=True, sweep=True, cam=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
