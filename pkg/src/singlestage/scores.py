"""Class-score aggregation: GAP/CAM baseline and nGWP with the focal size penalty.

All functions operate on the trailing ``(C, h, w)`` axes, so a leading batch
axis passes straight through. Backward functions return gradients with
respect to the class score maps (the background logit is a constant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError, ShapeError, as_tensor, softmax_over_channels


@dataclass(frozen=True)
class ClassifierWeights:
    a: np.ndarray  # (C, K)

    def __post_init__(self):
        object.__setattr__(self, "a", as_tensor(self.a, ndim=2, name="classifier weights"))

    @property
    def n_classes(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class NgwpConfig:
    epsilon: float = 1.0
    bg_score: float = 1.0
    _allow_zero: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        if self.epsilon < 0:
            return [f"epsilon must be >= 0, got {self.epsilon}"]
        if self.epsilon == 0 and not self._allow_zero:
            return ["epsilon=0 is only available via NgwpConfig.zero_epsilon()"]
        return []

    @classmethod
    def zero_epsilon(cls, bg_score: float = 1.0) -> "NgwpConfig":
        """Unregularised nGWP; discontinuous at empty masks. For analysis only."""
        return cls(epsilon=0.0, bg_score=bg_score, _allow_zero=True)


@dataclass(frozen=True)
class FocalConfig:
    p: float = 3.0
    lam: float = 0.01

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if self.p < 0:
            errs.append(f"focal p must be >= 0, got {self.p}")
        if self.lam <= 0:
            errs.append(f"focal lambda must be > 0, got {self.lam}")
        return errs


def _weights(w) -> np.ndarray:
    return w.a if isinstance(w, ClassifierWeights) else np.asarray(w, dtype=np.float64)


def gap_scores(features: np.ndarray, w) -> np.ndarray:
    a = _weights(w)
    if features.shape[0] != a.shape[1]:
        raise ShapeError(f"features have {features.shape[0]} channels, weights expect {a.shape[1]}")
    pooled = features.reshape(features.shape[0], -1).mean(axis=1)
    return a @ pooled


def cam_maps(features: np.ndarray, w) -> np.ndarray:
    a = _weights(w)
    if features.shape[0] != a.shape[1]:
        raise ShapeError(f"features have {features.shape[0]} channels, weights expect {a.shape[1]}")
    k, h, wd = features.shape
    return np.maximum(0.0, (a @ features.reshape(k, -1)).reshape(a.shape[0], h, wd))


def mask_logits(score_maps: np.ndarray, cfg: NgwpConfig) -> np.ndarray:
    """Prepend the constant background channel: (..., C, h, w) -> (..., C+1, h, w)."""
    bg = np.full(score_maps.shape[:-3] + (1,) + score_maps.shape[-2:], cfg.bg_score)
    return np.concatenate([bg, score_maps], axis=-3)


def build_mask_probs(score_maps: np.ndarray, cfg: NgwpConfig = NgwpConfig()) -> np.ndarray:
    return softmax_over_channels(mask_logits(score_maps, cfg), axis=-3)


def mask_probs_backward(mask: np.ndarray, grad_mask: np.ndarray) -> np.ndarray:
    """Softmax backward; returns the gradient for the C class score maps."""
    inner = (mask * grad_mask).sum(axis=-3, keepdims=True)
    g_logits = mask * (grad_mask - inner)
    return g_logits[..., 1:, :, :]


def ngwp(mask: np.ndarray, score_maps: np.ndarray, cfg: NgwpConfig = NgwpConfig()) -> np.ndarray:
    """Mask-weighted mean of each score map, with ``epsilon`` added to the weight total."""
    m = mask[..., 1:, :, :]
    if m.shape != score_maps.shape:
        raise ShapeError(f"mask classes {m.shape} do not match score maps {score_maps.shape}")
    num = (m * score_maps).sum(axis=(-2, -1))
    den = cfg.epsilon + m.sum(axis=(-2, -1))
    if np.any(den == 0):
        raise ZeroDivisionError("nGWP with epsilon=0 on an all-zero mask channel")
    return num / den


def ngwp_backward(mask, score_maps, cfg, grad_out):
    """Gradients of nGWP w.r.t. (class mask channels, score maps)."""
    m = mask[..., 1:, :, :]
    den = cfg.epsilon + m.sum(axis=(-2, -1))
    val = (m * score_maps).sum(axis=(-2, -1)) / den
    g = (grad_out / den)[..., None, None]
    g_m = g * (score_maps - val[..., None, None])
    g_y = g * m
    return g_m, g_y


def mean_mask(mask: np.ndarray) -> np.ndarray:
    """Spatial mean of each object-class channel (background excluded)."""
    return mask[..., 1:, :, :].mean(axis=(-2, -1))


def focal_penalty(mask: np.ndarray, cfg: FocalConfig = FocalConfig()) -> np.ndarray:
    mbar = mean_mask(mask)
    return (1.0 - mbar) ** cfg.p * np.log(cfg.lam + mbar)


def _focal_dmbar(mbar, cfg: FocalConfig):
    one_minus = 1.0 - mbar
    d = one_minus ** cfg.p / (cfg.lam + mbar)
    if cfg.p > 0:
        d = d - cfg.p * one_minus ** (cfg.p - 1.0) * np.log(cfg.lam + mbar)
    return d


def focal_penalty_backward(mask, cfg: FocalConfig, grad_out):
    """Gradient w.r.t. the class mask channels (uniform over pixels)."""
    mbar = mean_mask(mask)
    h, w = mask.shape[-2:]
    g = grad_out * _focal_dmbar(mbar, cfg) / (h * w)
    return np.broadcast_to(g[..., None, None], mask[..., 1:, :, :].shape).copy()


def classification_scores(mask, score_maps, ncfg: NgwpConfig = NgwpConfig(),
                          fcfg: FocalConfig = FocalConfig()) -> np.ndarray:
    return ngwp(mask, score_maps, ncfg) + focal_penalty(mask, fcfg)


def classification_scores_backward(mask, score_maps, ncfg, fcfg, grad_out):
    """Backprop image-level score gradients down to the class score maps.

    ``mask`` must be ``build_mask_probs(score_maps, ncfg)``.
    """
    g_m, g_y = ngwp_backward(mask, score_maps, ncfg, grad_out)
    g_m = g_m + focal_penalty_backward(mask, fcfg, grad_out)
    full = np.zeros_like(mask)
    full[..., 1:, :, :] = g_m
    return g_y + mask_probs_backward(mask, full)
