"""Random problem instances for finite-difference checks of the analytic gradients."""

from __future__ import annotations

import numpy as np

from .losses import LossValue, gradcheck, multilabel_softmargin, weighted_seg_loss
from .numerics import Rng, softmax_over_channels
from .pamr import IGNORE, PseudoLabels
from .scores import (FocalConfig, NgwpConfig, build_mask_probs, classification_scores,
                     classification_scores_backward)

OPS = ("softmargin", "segloss", "classification")
MAX_CLASSES = 8
MAX_SIDE = 8


def _dims(rng: Rng):
    c = int(rng.integers(1, MAX_CLASSES + 1))
    h, w = (int(v) for v in rng.integers(2, MAX_SIDE + 1, 2))
    return c, h, w


def _labels(rng: Rng, c: int) -> np.ndarray:
    z = (rng.random(c) < 0.5).astype(np.float64)
    z[int(rng.integers(c))] = 1.0
    return z


def softmargin_problem(rng: Rng):
    b, c = int(rng.integers(1, 4)), int(rng.integers(1, MAX_CLASSES + 1))
    y = rng.normal((b, c), 3.0)
    z = np.stack([_labels(rng, c) for _ in range(b)])
    return (lambda v: multilabel_softmargin(v, z)), y


def segloss_problem(rng: Rng):
    """Loss on softmax(x) for fixed pseudo labels, with ignored pixels and an invalid image."""
    c, h, w = _dims(rng)
    b = int(rng.integers(1, 4))
    x = rng.normal((b, c + 1, h, w), 2.0)
    pls = []
    for i in range(b):
        lab = rng.integers(0, c + 1, (h, w))
        lab[rng.random((h, w)) < 0.2] = IGNORE
        lab[0, 0] = 0
        pls.append(PseudoLabels(lab.astype(np.int64), valid=i == 0 or rng.random(1)[0] < 0.7, n_classes=c))

    def f(v):
        out = weighted_seg_loss(softmax_over_channels(v), pls)
        return LossValue(out.value, out.grad)
    return f, x


def classification_problem(rng: Rng, ncfg: NgwpConfig = NgwpConfig(), fcfg: FocalConfig = FocalConfig()):
    """Soft-margin loss on nGWP + focal scores, differentiated down to the score maps."""
    c, h, w = _dims(rng)
    s = rng.normal((c, h, w), 2.0)
    z = _labels(rng, c)

    def f(v):
        mask = build_mask_probs(v, ncfg)
        y = classification_scores(mask, v, ncfg, fcfg)
        loss = multilabel_softmargin(y, z)
        return loss.value, classification_scores_backward(mask, v, ncfg, fcfg, loss.grad)
    return f, s


_PROBLEMS = {"softmargin": softmargin_problem, "segloss": segloss_problem,
             "classification": classification_problem}


def check_op(op: str, seed: int = 0, instances: int = 20) -> list[float]:
    """Max relative error of each random instance of ``op``."""
    if op not in _PROBLEMS:
        raise ValueError(f"unknown op {op!r}; choose from {OPS}")
    rngs = Rng(seed).split(instances)
    return [gradcheck(*_PROBLEMS[op](r)) for r in rngs]
