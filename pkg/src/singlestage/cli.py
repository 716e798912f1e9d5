"""Command-line entry point.

Exit codes: 0 success, 1 a check or threshold failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .gradsuite import OPS, check_op
from .numerics import ParameterError, resize_nearest, softmax_over_channels
from .pamr import IGNORE, PamrConfig, affinity, refine
from .toytrain import TrainingError, eval_iou, gen_dataset, predict_labels, train
from .toytrain.train import TrainConfig

GRAD_TOLERANCE = 1e-4

log = logging.getLogger("singlestage")


class InputError(Exception):
    """Reported on stderr with exit code 2."""


def _dilations(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dilations must be comma-separated integers, got {text!r}")


def _finite(t: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise InputError(f"{name}: contains non-finite values")
    return t


# ---------------------------------------------------------------- refine

def refine_file(image_path, scores_path, dilations, iters) -> np.ndarray:
    """Refined (C, H, W) probabilities for an image and its (C, h, w) score maps."""
    image = io.load_rgb(image_path)
    scores = _finite(io.load_tnsr(scores_path), str(scores_path))
    if scores.ndim != 3 or scores.shape[0] < 1:
        raise InputError(f"{scores_path}: expected C x h x w scores, got shape {scores.shape}")
    try:
        cfg = PamrConfig(dilations=dilations, iterations=iters)
    except ParameterError as e:
        raise InputError(f"--dilations/--iters: {e}") from None
    mask = softmax_over_channels(resize_nearest(scores.astype(np.float64), image.shape[1:]), axis=0)
    return refine(mask, affinity(image, cfg), cfg.iterations)


def cmd_refine(args) -> int:
    refined = refine_file(args.image, args.scores, args.dilations, args.iters)
    io.save_tnsr(args.out, refined)
    if args.png:
        io.save_label_png(args.png, refined.argmax(axis=0))
    print(f"refined {refined.shape[0]} channels at {refined.shape[1]}x{refined.shape[2]} -> {args.out}")
    return 0


# ---------------------------------------------------------------- train-toy

def run_toy(cfg: TrainConfig, out_dir: Path) -> dict:
    """Train, then write metrics.json, config.json and validation label maps."""
    ds = gen_dataset(cfg.dataset)
    val = gen_dataset(cfg.val_dataset_config())
    model, metrics = train(ds, cfg, val=val)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sub in ("pred", "gt"):
        (out_dir / sub).mkdir(exist_ok=True)
    pred = predict_labels(model, val.images, cfg)
    for i in range(len(val)):
        io.save_tnsr(out_dir / "pred" / f"val_{i:04d}.tnsr", pred[i])
        io.save_tnsr(out_dir / "gt" / f"val_{i:04d}.tnsr", val.masks[i])
    doc = metrics.to_dict()
    io.dump_json(doc, out_dir / "metrics.json")
    io.dump_json(io.run_config_dict(cfg), out_dir / "config.json")
    return doc


def cmd_train_toy(args) -> int:
    try:
        cfg = io.load_run_config(args.config) if args.config else TrainConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed,
                                      dataset=dataclasses.replace(cfg.dataset, seed=args.seed))
    except ParameterError as e:
        raise InputError(f"invalid config {e}") from None
    try:
        doc = run_toy(cfg, Path(args.out_dir))
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 1
    print(f"mean IoU {doc['mean_iou']:.4f}  metrics -> {Path(args.out_dir) / 'metrics.json'}")
    return 0


# ---------------------------------------------------------------- eval

def _label_map(t: np.ndarray, name: str) -> np.ndarray:
    if t.ndim == 3:
        return t.argmax(axis=0)
    if t.ndim != 2:
        raise InputError(f"{name}: expected a label map or C x H x W probabilities, got shape {t.shape}")
    _finite(t, name)
    if np.any(t != np.round(t)) or t.min() < 0 or t.max() > IGNORE:
        raise InputError(f"{name}: label values must be integers in 0..{IGNORE}")
    return t.astype(np.int64)


def eval_dirs(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise InputError(f"{d}: not a directory")
    names = sorted(p.name for p in gt_dir.glob("*.tnsr"))
    if not names:
        raise InputError(f"{gt_dir}: no .tnsr files")
    missing = [n for n in names if not (pred_dir / n).is_file()]
    if missing:
        raise InputError(f"{pred_dir}: missing predictions for {', '.join(missing[:5])}")
    preds, gts = [], []
    for n in names:
        p = _label_map(io.load_tnsr(pred_dir / n), str(pred_dir / n))
        g = _label_map(io.load_tnsr(gt_dir / n), str(gt_dir / n))
        if p.shape != g.shape:
            raise InputError(f"{pred_dir / n}: shape {p.shape} differs from ground truth {g.shape}")
        preds.append(p.ravel())
        gts.append(g.ravel())
    pred, gt = np.concatenate(preds), np.concatenate(gts)
    labelled = np.concatenate([pred, gt[gt != IGNORE]])
    return eval_iou(pred, gt, int(labelled.max()) + 1)


def cmd_eval(args) -> int:
    m = eval_dirs(args.pred, args.gt)
    doc = {"per_class_iou": m.per_class_iou, "mean_iou": m.mean_iou}
    if args.out:
        io.dump_json(doc, args.out)
    print(f"mean IoU {m.mean_iou:.4f}")
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    errs = check_op(args.op, args.seed, args.instances)
    worst = max(errs)
    print(f"{args.op}: {len(errs)} instances, max rel err {worst:.3e}")
    return 0 if worst < GRAD_TOLERANCE else 1


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="singlestage", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("refine", help="refine score maps against an image")
    r.add_argument("--image", required=True, help="RGB image (PNG)")
    r.add_argument("--scores", required=True, help="C x h x w TNSR logits")
    r.add_argument("--dilations", type=_dilations, default=PamrConfig().dilations)
    r.add_argument("--iters", type=int, default=PamrConfig().iterations)
    r.add_argument("--out", required=True, help="refined probabilities (TNSR)")
    r.add_argument("--png", help="argmax label map as indexed PNG")
    r.set_defaults(func=cmd_refine)

    t = sub.add_parser("train-toy", help="train on the synthetic shapes set")
    t.add_argument("--config", help="JSON run config; omitted keys keep defaults")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, help="overrides both the training and dataset seed")
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", help="mean IoU of prediction files against ground truth")
    e.add_argument("--pred", required=True, help="directory of TNSR label maps or probabilities")
    e.add_argument("--gt", required=True, help="directory of TNSR label maps, same file names")
    e.add_argument("--out", help="write metrics JSON here")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    g.add_argument("--op", required=True, choices=OPS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, io.FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
