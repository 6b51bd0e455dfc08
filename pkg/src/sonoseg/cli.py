"""Operator-facing command line: gradient checks, toy training, evaluation,
feature extraction, rendering, and synthetic data generation.

Exit codes: 0 success, 1 validation failure, 2 I/O error."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config
from .archive import parse_config_text, save_tensor
from .data import (DEFAULT_PALETTE, DiceReport, load_image, load_mask,
                   mean_dice, render_overlay, save_raster)
from .fpn import extract
from .gradchecks import run_suite, summarize
from .model import load_model, predict_label_mask, save_model
from .segmenter import OrganSegmenter
from .synth import generate_dataset, load_dataset
from .tensor import Tensor4
from .train import CSV_HEADER, DivergenceError, format_row

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

RUN_CONFIG_SCHEMA = {
    "seed": int,
    "pyramid_width": int,
    "srnn_rounds": int,
    "srnn_enabled": bool,
    "learning_rate": float,
    "momentum": float,
    "batch_size": int,
    "max_steps": int,
    "threads": int,
    "score_thresh": float,
    "normalized_deltas": bool,
    "absent_class_policy": str,
}

RUN_CONFIG_DEFAULTS = {
    "seed": 0,
    "pyramid_width": 64,
    "srnn_rounds": 2,
    "srnn_enabled": True,
    "learning_rate": 0.0025,
    "momentum": 0.9,
    "batch_size": 1,
    "max_steps": 2000,
    "threads": 1,
    "score_thresh": 0.5,
    "normalized_deltas": False,
    "absent_class_policy": "zero",
}


def load_run_config(args) -> dict:
    cfg = dict(RUN_CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        cfg.update(parse_config_text(text, RUN_CONFIG_SCHEMA))
    for key in RUN_CONFIG_SCHEMA:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("pyramid_width", "srnn_rounds", "learning_rate", "momentum",
                "batch_size", "threads", "score_thresh"):
        if cfg[key] <= 0:
            raise ValueError(f"config key {key} must be positive, got {cfg[key]}")
    for key in ("seed", "max_steps"):  # zero allowed: fresh init / no training
        if cfg[key] < 0:
            raise ValueError(f"config key {key} must be >= 0, got {cfg[key]}")
    if cfg["absent_class_policy"] not in ("zero", "skip"):
        raise ValueError("absent_class_policy must be 'zero' or 'skip'")
    return cfg


def _write_run_manifest(run_dir: Path, outputs: list[str]) -> None:
    (run_dir / "manifest.txt").write_text(
        "".join(f"{name}\n" for name in outputs))


def cmd_gradcheck(args) -> int:
    reports = run_suite(op_filter=args.op or None, trials=args.trials,
                        inject_bug=args.inject_bug)
    text, ok = summarize(reports)
    print(text)
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_synth_data(args) -> int:
    stems = generate_dataset(args.out, args.count, size=args.size,
                             seed=args.seed if args.seed is not None else 0,
                             appearance=args.appearance)
    print(f"wrote {len(stems)} image/mask pairs under {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = load_run_config(args)
    config.set_num_threads(cfg["threads"])
    images, masks, _stems = load_dataset(args.data)
    if not images:
        print(f"no image/mask pairs found under {args.data}", file=sys.stderr)
        return EXIT_IO
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    est = OrganSegmenter(
        pyramid_width=cfg["pyramid_width"], srnn_rounds=cfg["srnn_rounds"],
        srnn_enabled=cfg["srnn_enabled"], learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"], batch_size=cfg["batch_size"],
        max_steps=cfg["max_steps"], seed=cfg["seed"],
        score_thresh=cfg["score_thresh"],
        normalized_deltas=cfg["normalized_deltas"])
    rows = [CSV_HEADER]
    try:
        if cfg["max_steps"] > 0:
            est.fit(images, masks)
            rows += [format_row(r["step"], r) for r in est.history_]
        else:
            est.init_weights()
    except DivergenceError as exc:
        print(str(exc), file=sys.stderr)
        (run_dir / "loss.csv").write_text("\n".join(rows) + "\n")
        return EXIT_VALIDATION
    (run_dir / "loss.csv").write_text("\n".join(rows) + "\n")
    save_model(run_dir / "checkpoint", est.weights_)
    _write_run_manifest(run_dir, ["loss.csv", "checkpoint/"])
    print(f"trained {cfg['max_steps']} steps; outputs under {run_dir}")
    return EXIT_OK


def _aggregate_reports(reports: list[DiceReport], policy: str):
    """Dataset-level scores: per-image mean and per-class pooled counts."""
    per_image_mean = (sum(r.mean for r in reports) / len(reports)
                      if reports else 0.0)
    pooled = {}
    for cid in range(1, len(DEFAULT_PALETTE)):
        nx = sum(r.counts[cid][0] for r in reports)
        ny = sum(r.counts[cid][1] for r in reports)
        ni = sum(r.counts[cid][2] for r in reports)
        pooled[cid] = 2.0 * ni / (nx + ny + 1e-6)
    pooled_mean = sum(pooled.values()) / len(pooled) if pooled else 0.0
    return per_image_mean, pooled, pooled_mean


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    config.set_num_threads(cfg["threads"])
    policy = cfg["absent_class_policy"]
    data = Path(args.data)
    mask_dir = data / "masks"
    if not mask_dir.is_dir():
        print(f"no masks/ directory under {data}", file=sys.stderr)
        return EXIT_IO
    weights = None
    if args.pred_masks is None:
        if args.checkpoint is None:
            print("eval requires --checkpoint or --pred-masks", file=sys.stderr)
            return EXIT_VALIDATION
        weights = load_model(args.checkpoint)
    rows = []
    reports = []
    skipped = 0
    header = "image," + ",".join(DEFAULT_PALETTE.names[1:]) + ",mean"
    rows.append(header)
    for mpath in sorted(mask_dir.glob("*.png")):
        gt = load_mask(mpath)
        if weights is not None:
            ipath = data / "images" / mpath.name
            if not ipath.exists():
                skipped += 1
                continue
            pred = predict_label_mask(load_image(ipath), weights)
        else:
            ppath = Path(args.pred_masks) / mpath.name
            if not ppath.exists():
                skipped += 1
                continue
            pred = load_mask(ppath)
        rep = mean_dice(pred, gt, absent_class_policy=policy)
        reports.append(rep)
        rows.append(f"{mpath.stem}," + rep.to_csv_row())
    if not reports:
        print("no evaluable image/mask pairs", file=sys.stderr)
        return EXIT_IO
    per_image_mean, pooled, pooled_mean = _aggregate_reports(reports, policy)
    summary = [
        f"aggregate.per_image_mean = {per_image_mean:.9f}",
        f"aggregate.per_class_pooled_mean = {pooled_mean:.9f}",
    ]
    for cid, d in pooled.items():
        summary.append(
            f"aggregate.pooled.{DEFAULT_PALETTE.names[cid]} = {d:.9f}")
    summary.append(f"skipped = {skipped}")
    out_text = "\n".join(rows) + "\n"
    if args.out:
        run_dir = Path(args.out)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "dice.csv").write_text(out_text)
        (run_dir / "summary.txt").write_text("\n".join(summary) + "\n")
        _write_run_manifest(run_dir, ["dice.csv", "summary.txt"])
    print(out_text, end="")
    print("\n".join(summary))
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = load_run_config(args)
    config.set_num_threads(cfg["threads"])
    try:
        weights = load_model(args.checkpoint)
        img = load_image(args.image)
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    t = Tensor4(img[None, None])
    with config.no_grad():
        pyramid = extract(t, weights.fpn, weights.cfg.srnn_enabled)
    outputs = []
    for stride, fmap in pyramid.levels:
        name = f"level_stride{stride}.tns4"
        save_tensor(run_dir / name, fmap.data)
        outputs.append(name)
    _write_run_manifest(run_dir, outputs)
    print(f"wrote {len(outputs)} pyramid levels under {run_dir}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        img = np.asarray((load_image(args.image) * 255).round(), dtype=np.uint8)
        mask = load_mask(args.mask)
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = render_overlay(img, mask, DEFAULT_PALETTE, alpha=args.alpha)
    save_raster(args.out, out)
    print(f"wrote overlay to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sonoseg")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--pyramid-width", dest="pyramid_width", type=int)
        p.add_argument("--srnn-rounds", dest="srnn_rounds", type=int)
        p.add_argument("--srnn-enabled", dest="srnn_enabled",
                       type=lambda s: s.lower() == "true")
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--score-thresh", dest="score_thresh", type=float)
        p.add_argument("--normalized-deltas", dest="normalized_deltas",
                       type=lambda s: s.lower() == "true")
        p.add_argument("--absent-class-policy", dest="absent_class_policy")

    g = sub.add_parser("gradcheck", help="run the gradient-check suite")
    g.add_argument("--op", default="", help="substring filter on op names")
    g.add_argument("--trials", type=int, default=10)
    g.add_argument("--inject-bug", default=None,
                   help="mutation witness, e.g. conv-backward")
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth-data", help="generate a synthetic toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--appearance",
                   choices=("distinct", "ambiguous", "directional"),
                   default="distinct")
    s.set_defaults(fn=cmd_synth_data)

    t = sub.add_parser("train-toy", help="toy training run")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    add_run_flags(t)
    t.set_defaults(fn=cmd_train_toy)

    e = sub.add_parser("eval", help="Dice evaluation of a checkpoint or masks")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--pred-masks", dest="pred_masks",
                   help="evaluate pre-rendered prediction masks instead of a model")
    e.add_argument("--out")
    add_run_flags(e)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("extract", help="dump pyramid feature archives")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--out", required=True)
    add_run_flags(x)
    x.set_defaults(fn=cmd_extract)

    r = sub.add_parser("render", help="alpha-blend a mask over an image")
    r.add_argument("--image", required=True)
    r.add_argument("--mask", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--alpha", type=float, default=0.4)
    r.set_defaults(fn=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError,) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
