"""Two-phase single-stage training on the toy set, prediction and IoU evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..gate import GateConfig
from ..losses import multilabel_softmargin, weighted_seg_loss
from ..numerics import ParameterError, Rng, sigmoid, upsample_nearest, upsample_nearest_backward
from ..pamr import IGNORE, PamrConfig, affinity, extract_pseudo_gt, refine_sparse
from ..scores import (FocalConfig, NgwpConfig, build_mask_probs, classification_scores,
                      classification_scores_backward)
from .data import ToyDataset, ToyDatasetConfig
from .model import OUTPUT_STRIDE, ModelConfig, ToyNet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 5
    epochs_total: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    prune_threshold: float = 0.1
    use_pamr: bool = True
    enable_phase2: bool = True
    hflip: bool = True
    n_val: int = 60
    gate: GateConfig = field(default_factory=GateConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    ngwp: NgwpConfig = field(default_factory=NgwpConfig)
    pamr: PamrConfig = field(default_factory=PamrConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: ToyDatasetConfig = field(default_factory=ToyDatasetConfig)

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if self.epochs_total < 0:
            errs.append("epochs_total must be >= 0")
        if self.epochs_phase1 < 0:
            errs.append("epochs_phase1 must be >= 0")
        if self.epochs_total > 0 and not self.epochs_phase1 < self.epochs_total:
            errs.append("epochs_phase1 must be < epochs_total")
        if self.lr <= 0:
            errs.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            errs.append("momentum must be in [0, 1)")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if not 0 <= self.prune_threshold < 1:
            errs.append("prune_threshold must be in [0, 1)")
        if self.n_val < 1:
            errs.append("n_val must be >= 1")
        return errs

    def val_dataset_config(self) -> ToyDatasetConfig:
        d = self.dataset
        return ToyDatasetConfig(**{**d.__dict__, "n_images": self.n_val, "seed": d.seed + 7919})


@dataclass
class Metrics:
    per_class_iou: list  # index 0 = background; None where a class is absent from pred and gt
    mean_iou: float
    cls_accuracy: float | None = None
    loss_curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "mean_iou": self.mean_iou,
                "cls_accuracy": self.cls_accuracy, "loss_curves": self.loss_curves}


def eval_iou(predictions: np.ndarray, gt_masks: np.ndarray, n_classes: int | None = None) -> Metrics:
    """Per-class IoU accumulated over the whole split; IGNORE gt pixels are skipped.

    ``n_classes`` counts background; classes absent from both prediction and
    ground truth are left out of the mean.
    """
    pred = np.asarray(predictions).astype(np.int64)
    gt = np.asarray(gt_masks).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != IGNORE
    pred, gt = pred[keep], gt[keep]
    n = n_classes or int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    ious = []
    for c in range(n):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        ious.append(None if union == 0 else np.count_nonzero(p & g) / union)
    present = [v for v in ious if v is not None]
    return Metrics(per_class_iou=ious, mean_iou=float(np.mean(present)) if present else 0.0)


def _hflip(x):
    return x[..., ::-1].copy()


class _AffinityCache:
    """Affinities depend on the image alone; reuse them across epochs."""

    def __init__(self, images, cfg: PamrConfig):
        self.images, self.cfg, self.store = images, cfg, {}

    def get(self, i, flipped):
        """Sparse refinement operator for image ``i``."""
        key = (i, flipped)
        if key not in self.store:
            img = _hflip(self.images[i]) if flipped else self.images[i]
            self.store[key] = affinity(img, self.cfg).to_sparse()
        return self.store[key]


def pseudo_labels_for(mask_up, labels, ops, pamr: PamrConfig, use_pamr: bool = True):
    """Refine each image's upsampled mask and extract its pseudo ground truth."""
    out = []
    for b in range(mask_up.shape[0]):
        ref = refine_sparse(mask_up[b], ops[b], pamr.iterations) if use_pamr else mask_up[b]
        out.append(extract_pseudo_gt(ref, labels[b], pamr))
    return out


def train(dataset: ToyDataset, cfg: TrainConfig, rng: Rng | None = None,
          val: ToyDataset | None = None):
    """Returns ``(model, Metrics)``; metrics are measured on ``val`` (else the training set)."""
    rng = rng or Rng(cfg.seed)
    init_rng, order_rng, gate_rng = rng.split(3)
    model = ToyNet(dataset.n_classes, cfg.gate, cfg.model).init(init_rng)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    affs = _AffinityCache(dataset.images, cfg.pamr)
    curves = {"cls": [], "seg": [], "valid_pseudo_frac": []}
    n = len(dataset)
    for epoch in range(cfg.epochs_total):
        phase2 = cfg.enable_phase2 and epoch >= cfg.epochs_phase1
        order = order_rng.permutation(n)
        flips = order_rng.random(n) < 0.5 if cfg.hflip else np.zeros(n, dtype=bool)
        cls_sum = seg_sum = 0.0
        n_valid = n_seen = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            fl = flips[idx]
            x = dataset.images[idx].copy()
            x[fl] = x[fl][..., ::-1]
            z = dataset.labels[idx]
            scores, cache = model.forward(x, train=True, rng=gate_rng)
            mask = build_mask_probs(scores, cfg.ngwp)
            y = classification_scores(mask, scores, cfg.ngwp, cfg.focal)
            l_cls = multilabel_softmargin(y, z)
            g_scores = classification_scores_backward(mask, scores, cfg.ngwp, cfg.focal, l_cls.grad)
            loss = l_cls.value
            if phase2:
                mask_up = upsample_nearest(mask, OUTPUT_STRIDE)
                ops = [affs.get(int(i), bool(f)) for i, f in zip(idx, fl)] if cfg.use_pamr else None
                pls = pseudo_labels_for(mask_up, z, ops, cfg.pamr, cfg.use_pamr)
                l_seg = weighted_seg_loss(mask_up, pls)
                g_scores = g_scores + upsample_nearest_backward(l_seg.grad[:, 1:], OUTPUT_STRIDE)
                loss += l_seg.value
                seg_sum += l_seg.value * len(idx)
                n_valid += sum(pl.valid for pl in pls)
                n_seen += len(pls)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = model.backward(cache, g_scores)
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v += g
                model.params[k] -= cfg.lr * v
            cls_sum += l_cls.value * len(idx)
        curves["cls"].append(cls_sum / n)
        curves["seg"].append(seg_sum / n if phase2 else None)
        curves["valid_pseudo_frac"].append(n_valid / n_seen if n_seen else None)
        log.info("epoch %d cls %.4f seg %s", epoch, curves["cls"][-1], curves["seg"][-1])
    metrics = evaluate(model, val if val is not None else dataset, cfg)
    metrics.loss_curves = curves
    return model, metrics


def forward_infer(model: ToyNet, images: np.ndarray, cfg: TrainConfig):
    """Inference-mode score maps, masks and image-level scores for a batch."""
    scores, _ = model.forward(images, train=False)
    mask = build_mask_probs(scores, cfg.ngwp)
    y = classification_scores(mask, scores, cfg.ngwp, cfg.focal)
    return scores, mask, y


def predict(model: ToyNet, image: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Image-resolution MaskProbs with low-confidence classes zeroed.

    Accepts (3, H, W) or a batch (B, 3, H, W).
    """
    single = image.ndim == 3
    x = image[None] if single else image
    _, mask, y = forward_infer(model, x, cfg)
    conf = sigmoid(y)
    mask = mask.copy()
    mask[:, 1:][conf < cfg.prune_threshold] = 0.0
    mask = upsample_nearest(mask, OUTPUT_STRIDE)
    return mask[0] if single else mask


def predict_labels(model: ToyNet, images: np.ndarray, cfg: TrainConfig, batch: int = 32) -> np.ndarray:
    out = [predict(model, images[i:i + batch], cfg).argmax(axis=1) for i in range(0, len(images), batch)]
    return np.concatenate(out)


def evaluate(model: ToyNet, ds: ToyDataset, cfg: TrainConfig) -> Metrics:
    pred = predict_labels(model, ds.images, cfg)
    m = eval_iou(pred, ds.masks, ds.n_classes + 1)
    ys = np.concatenate([forward_infer(model, ds.images[i:i + 32], cfg)[2] for i in range(0, len(ds), 32)])
    m.cls_accuracy = float(((ys > 0) == (ds.labels > 0.5)).mean())
    return m
