"""Stochastic Gate between deep and shallow features, and Global Cue Injection.

Functions accept ``(K, h, w)`` tensors or batches ``(B, K, h, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParameterError, Rng, ShapeError, bernoulli_mask

GATE_MODES = ("stochastic", "deterministic", "expected_r")
SIGMA_FLOOR = 1e-5


@dataclass(frozen=True)
class GateConfig:
    """Mixing rate and gate behaviour.

    ``mode`` selects the training-time rule: ``stochastic`` draws r~Bern(psi);
    ``deterministic`` uses the inference mix during training as well;
    ``expected_r`` substitutes r=psi into the stochastic rule. ``per_pixel``
    shares one draw across all channels of a pixel.
    """

    psi: float = 0.3
    gci_enabled: bool = True
    per_pixel: bool = False
    mode: str = "stochastic"

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if not 0.0 <= self.psi < 1.0:
            errs.append(f"psi must lie in [0, 1), got {self.psi}")
        if self.mode not in GATE_MODES:
            errs.append(f"mode must be one of {GATE_MODES}, got {self.mode!r}")
        return errs

    @property
    def delta(self) -> float:
        return 1.0 / (1.0 - self.psi)


def _check_pair(x_d, x_s):
    if x_d.shape != x_s.shape:
        raise ShapeError(f"deep {x_d.shape} and shallow {x_s.shape} features differ")


def draw_gate(rng: Rng, shape, cfg: GateConfig) -> np.ndarray:
    if cfg.per_pixel:
        shape = tuple(shape[:-3]) + (1,) + tuple(shape[-2:])
    return bernoulli_mask(rng, shape, cfg.psi)


def gate_mix(x_d, x_s, r, psi: float) -> np.ndarray:
    delta = 1.0 / (1.0 - psi)
    return (1.0 - r) * delta * (x_d - psi * x_s) + r * x_s


def gate_train(x_d: np.ndarray, x_s: np.ndarray, cfg: GateConfig, rng: Rng,
               return_draw: bool = False):
    """Training-time gate; unbiased for ``x_d`` in the stochastic mode."""
    if not 0.0 <= cfg.psi < 1.0:
        raise ParameterError(f"psi must lie in [0, 1), got {cfg.psi}")
    _check_pair(x_d, x_s)
    if cfg.mode == "deterministic":
        r = None
        out = gate_infer(x_d, x_s, cfg)
    else:
        r = cfg.psi if cfg.mode == "expected_r" else draw_gate(rng, x_d.shape, cfg)
        out = gate_mix(x_d, x_s, r, cfg.psi)
    return (out, r) if return_draw else out


def gate_train_backward(r, cfg: GateConfig, grad_out):
    """Gradients w.r.t. (x_d, x_s) given the draw returned by :func:`gate_train`."""
    if r is None:
        return (1.0 - cfg.psi) * grad_out, cfg.psi * grad_out
    keep = (1.0 - r) * cfg.delta
    return keep * grad_out, (r - keep * cfg.psi) * grad_out


def gate_infer(x_d: np.ndarray, x_s: np.ndarray, cfg: GateConfig) -> np.ndarray:
    _check_pair(x_d, x_s)
    return (1.0 - cfg.psi) * x_d + cfg.psi * x_s


@dataclass
class GciParams:
    expand_w: np.ndarray  # (2K, K)
    expand_b: np.ndarray  # (2K,)
    project_w: np.ndarray  # (K, K)
    project_b: np.ndarray  # (K,)

    @property
    def channels(self) -> int:
        return self.project_w.shape[0]

    @classmethod
    def init(cls, k: int, rng: Rng) -> "GciParams":
        """Uniform init scaled by fan-in."""
        bound = 1.0 / np.sqrt(k)
        return cls(
            expand_w=rng.uniform(-bound, bound, (2 * k, k)),
            expand_b=np.zeros(2 * k),
            project_w=rng.uniform(-bound, bound, (k, k)),
            project_b=np.zeros(k),
        )

    @classmethod
    def identity(cls, k: int, z: float = 1.0, b: float = 0.0) -> "GciParams":
        """Expansion that ignores x_d and yields constant modulation (z, b)."""
        return cls(
            expand_w=np.zeros((2 * k, k)),
            expand_b=np.concatenate([np.full(k, z), np.full(k, b)]),
            project_w=np.eye(k),
            project_b=np.zeros(k),
        )


def _pointwise(w, b, x):
    lead, (k, h, wd) = x.shape[:-3], x.shape[-3:]
    out = np.matmul(w, x.reshape(lead + (k, h * wd))) + b[:, None]
    return out.reshape(lead + (w.shape[0], h, wd))


def _pointwise_xgrad(w, g):
    lead, (o, h, wd) = g.shape[:-3], g.shape[-3:]
    return np.matmul(w.T, g.reshape(lead + (o, h * wd))).reshape(lead + (w.shape[1], h, wd))


def _pointwise_wgrad(g, x):
    """Weight gradient of a 1x1 conv, summed over any batch axes."""
    g = g.reshape((-1, g.shape[-3], g.shape[-2] * g.shape[-1]))
    x = x.reshape((-1, x.shape[-3], x.shape[-2] * x.shape[-1]))
    return np.matmul(g, x.transpose(0, 2, 1)).sum(axis=0)


def gci(x_d: np.ndarray, x_s: np.ndarray, params: GciParams, return_cache: bool = False):
    """Modulate instance-normalised shallow features with max-pooled deep cues."""
    _check_pair(x_d, x_s)
    k = x_s.shape[-3]
    if params.channels != k or params.expand_w.shape != (2 * k, k):
        raise ShapeError(f"GCI parameters for K={params.channels}, features have K={k}")
    e = _pointwise(params.expand_w, params.expand_b, x_d)
    flat = e.reshape(e.shape[:-2] + (-1,))
    v = flat.max(axis=-1)
    z, b = v[..., :k], v[..., k:]
    mu = x_s.mean(axis=(-2, -1), keepdims=True)
    sd = np.sqrt(((x_s - mu) ** 2).mean(axis=(-2, -1), keepdims=True))
    floored = sd < SIGMA_FLOOR
    sd = np.maximum(sd, SIGMA_FLOOR)
    xn = (x_s - mu) / sd
    pre = z[..., None, None] * xn + b[..., None, None]
    act = np.maximum(pre, 0.0)
    out = _pointwise(params.project_w, params.project_b, act)
    if not return_cache:
        return out
    cache = dict(x_d=x_d, e=e, argmax=flat.argmax(axis=-1), z=z, xn=xn, sd=sd,
                 floored=floored, pre=pre, act=act)
    return out, cache


def gci_backward(params: GciParams, cache: dict, grad_out: np.ndarray):
    """Returns (grad_x_d, grad_x_s, GciParams-shaped parameter gradients)."""
    act, pre, xn, sd, z = cache["act"], cache["pre"], cache["xn"], cache["sd"], cache["z"]
    g_pw = _pointwise_wgrad(grad_out, act)
    g_pb = grad_out.sum(axis=tuple(range(grad_out.ndim - 3)) + (-2, -1))
    g_act = _pointwise_xgrad(params.project_w, grad_out)
    g_pre = g_act * (pre > 0)
    g_z = (g_pre * xn).sum(axis=(-2, -1))
    g_b = g_pre.sum(axis=(-2, -1))
    g_xn = g_pre * z[..., None, None]
    # Instance-norm backward; sigma treated as constant where floored.
    mean_g = g_xn.mean(axis=(-2, -1), keepdims=True)
    mean_gx = (g_xn * xn).mean(axis=(-2, -1), keepdims=True)
    mean_gx = np.where(cache["floored"], 0.0, mean_gx)
    g_xs = (g_xn - mean_g - xn * mean_gx) / sd
    g_v = np.concatenate([g_z, g_b], axis=-1)
    e = cache["e"]
    g_e = np.zeros(e.shape[:-2] + (e.shape[-2] * e.shape[-1],))
    np.put_along_axis(g_e, cache["argmax"][..., None], g_v[..., None], axis=-1)
    g_e = g_e.reshape(e.shape)
    g_ew = _pointwise_wgrad(g_e, cache["x_d"])
    g_eb = g_e.sum(axis=tuple(range(g_e.ndim - 3)) + (-2, -1))
    g_xd = _pointwise_xgrad(params.expand_w, g_e)
    return g_xd, g_xs, GciParams(g_ew, g_eb, g_pw, g_pb)
