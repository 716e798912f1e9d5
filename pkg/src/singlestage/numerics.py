"""Dense-tensor substrate shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major, with
channel-first ``(C, h, w)`` layout (a leading batch axis is allowed where
noted). Randomness is always passed in explicitly through :class:`Rng`.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are empty or disagree."""


class ParameterError(ValueError):
    """Raised when a scalar hyperparameter is out of its valid range."""


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Convert external input to a finite float64 array.

    NaN/Inf are rejected here so that downstream code never has to check.
    """
    t = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and t.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dims, got shape {t.shape}")
    if t.size == 0:
        raise ShapeError(f"{name}: empty tensor with shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name}: non-finite entries")
    return t


def softmax_over_channels(t: np.ndarray, axis: int = -3) -> np.ndarray:
    """Per-pixel softmax across the channel axis (max-subtracted)."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0 or t.ndim < 1:
        raise ShapeError(f"softmax on empty tensor of shape {t.shape}")
    z = t - t.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_over_channels(t: np.ndarray, axis: int = -3) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    z = t - t.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def global_max_pool(t: np.ndarray) -> np.ndarray:
    """(K, h, w) -> (K,): spatial maximum of each channel."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[1] == 0 or t.shape[2] == 0 or t.shape[0] == 0:
        raise ShapeError(f"global_max_pool expects non-empty (K,h,w), got {t.shape}")
    return t.reshape(t.shape[0], -1).max(axis=1)


def global_max_pool_backward(t: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each channel's gradient to its (first) argmax position."""
    k = t.shape[0]
    flat = t.reshape(k, -1)
    idx = flat.argmax(axis=1)
    g = np.zeros_like(flat)
    g[np.arange(k), idx] = grad_out
    return g.reshape(t.shape)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def upsample_nearest(t: np.ndarray, factor: int) -> np.ndarray:
    """Integer-factor nearest upsampling over the last two axes."""
    if factor == 1:
        return t
    return t.repeat(factor, axis=-2).repeat(factor, axis=-1)


def upsample_nearest_backward(g: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return g
    *lead, h, w = g.shape
    return g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def resize_nearest(t: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to ``size`` (any ratio)."""
    h, w = t.shape[-2:]
    oh, ow = size
    rows = np.minimum((np.arange(oh) * h) // oh, h - 1)
    cols = np.minimum((np.arange(ow) * w) // ow, w - 1)
    return t[..., rows[:, None], cols[None, :]]


class Rng:
    """Seedable random stream (PCG64 underneath).

    A given seed always yields the same sample stream; :meth:`split` derives
    independent child streams deterministically.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def _from_seq(cls, seq: np.random.SeedSequence) -> "Rng":
        r = cls.__new__(cls)
        r.seed = int(seq.entropy) if isinstance(seq.entropy, int) else 0
        r._seq = seq
        r.generator = np.random.Generator(np.random.PCG64(seq))
        return r

    def split(self, n: int = 2) -> list["Rng"]:
        return [Rng._from_seq(s) for s in self._seq.spawn(n)]

    def random(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=None):
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def bernoulli_mask(rng: Rng, shape, psi: float) -> np.ndarray:
    """i.i.d. Bernoulli(psi) draws as a float64 0/1 tensor."""
    if not 0.0 <= psi < 1.0:
        raise ParameterError(f"psi must lie in [0, 1), got {psi}")
    return (rng.random(shape) < psi).astype(np.float64)
