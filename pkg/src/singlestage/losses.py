"""Classification and self-supervised segmentation losses with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import ParameterError, Rng, ShapeError, sigmoid
from .pamr import IGNORE, PseudoLabels


class GradcheckError(RuntimeError):
    pass


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def _softplus(x):
    return np.logaddexp(0.0, x)


def multilabel_softmargin(y: np.ndarray, z: np.ndarray) -> LossValue:
    """Mean per-class logistic loss; a leading batch axis is averaged too.

    Written as softplus terms, so large |y| neither overflows nor loses the
    gradient's sign.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"scores {y.shape} vs labels {z.shape}")
    if np.any((z != 0) & (z != 1)):
        raise ValueError("labels must be binary")
    per = z * _softplus(-y) + (1.0 - z) * _softplus(y)
    n = y.size
    return LossValue(value=float(per.sum() / n), grad=(sigmoid(y) - z) / n)


def _as_batch(mask, pseudo):
    if isinstance(pseudo, PseudoLabels):
        return mask[None], [pseudo], True
    return mask, list(pseudo), False


def class_weights(pl: PseudoLabels) -> np.ndarray:
    """Per-image balancing weights q for channels 0..C."""
    total = pl.total
    return (total - pl.counts) / (1.0 + total)


def weighted_seg_loss(mask: np.ndarray, pseudo: PseudoLabels | Sequence[PseudoLabels]) -> LossValue:
    """Class-balanced cross-entropy against pseudo labels.

    ``mask`` holds softmax probabilities, (C+1, h, w) or (B, C+1, h, w). The
    returned gradient is with respect to the pre-softmax logits (same shape
    as ``mask``). Images flagged invalid contribute nothing.
    """
    m, items, single = _as_batch(np.asarray(mask, dtype=np.float64), pseudo)
    if len(items) != m.shape[0]:
        raise ShapeError(f"{len(items)} pseudo label maps for batch of {m.shape[0]}")
    b, c1, h, w = m.shape
    grad = np.zeros_like(m)
    totals = np.array([pl.total if pl.valid else 0 for pl in items], dtype=np.float64)
    norm = totals.sum()
    if norm == 0:
        return LossValue(0.0, grad[0] if single else grad)
    value = 0.0
    for i, pl in enumerate(items):
        if totals[i] == 0:
            continue
        lab = pl.labels
        if lab.shape != (h, w):
            raise ShapeError(f"pseudo labels {lab.shape} vs mask {(h, w)}")
        if np.any((lab != IGNORE) & ((lab < 0) | (lab >= c1))):
            raise ValueError("pseudo label outside 0..C")
        q = class_weights(pl)
        sel = lab != IGNORE
        ii, jj = np.nonzero(sel)
        cc = lab[sel]
        coef = totals[i] / (norm * h * w)
        qpix = q[cc]
        p_true = m[i, cc, ii, jj]
        value += coef * float(np.sum(-qpix * np.log(np.maximum(p_true, np.finfo(float).tiny))))
        g = np.zeros((c1, h, w))
        g[:, ii, jj] = qpix * m[i][:, ii, jj]
        g[cc, ii, jj] -= qpix
        grad[i] = coef * g
    return LossValue(value, grad[0] if single else grad)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a-n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, h: float = 1e-5,
              rng: Rng | None = None, max_coords: int = 10_000, floor: float = 1e-6) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` returns ``(value, grad)`` or a :class:`LossValue`. Above
    ``max_coords`` coordinates a random subset is checked.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ParameterError(f"step {h} outside [1e-7, 1e-4]")

    def call(v):
        out = f(v)
        if isinstance(out, LossValue):
            return out.value, out.grad
        return out

    x = np.array(x, dtype=np.float64)
    val, grad = call(x)
    if not np.isfinite(val) or not np.all(np.isfinite(grad)):
        raise GradcheckError("non-finite value or gradient at the base point")
    flat_idx = np.arange(x.size)
    if x.size > max_coords:
        flat_idx = (rng or Rng(0)).permutation(x.size)[:max_coords]
    numeric = np.empty(len(flat_idx))
    xf = x.reshape(-1)
    for n, k in enumerate(flat_idx):
        orig = xf[k]
        xf[k] = orig + h
        fp = call(x)[0]
        xf[k] = orig - h
        fm = call(x)[0]
        xf[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradcheckError(f"non-finite value at coordinate {k}")
        numeric[n] = (fp - fm) / (2 * h)
    analytic = np.asarray(grad, dtype=np.float64).reshape(-1)[flat_idx]
    return float(relative_error(analytic, numeric, floor).max())
