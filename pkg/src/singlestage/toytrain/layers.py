"""Batched 2-D convolution with explicit backward (im2col), for the toy network."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, pad, dil):
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def im2col(x, k, stride=1, pad=0, dil=1):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo) plus output size."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    span = dil * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))[:, :, ::stride, ::stride, ::dil, ::dil]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return cols, ho, wo


def col2im(cols, x_shape, k, stride=1, pad=0, dil=1):
    b, c, h, w = x_shape
    ho, wo = _out_size(h, k, stride, pad, dil), _out_size(w, k, stride, pad, dil)
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dil, j * dil
            xp[:, :, y0:y0 + stride * ho:stride, x0:x0 + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


class Conv2d:
    """3x3 (or kxk) convolution; parameters live in ``params`` as W (Cout, Cin*k*k) and b."""

    def __init__(self, name, cin, cout, k=3, stride=1, pad=None, dil=1):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        self.stride, self.dil = stride, dil
        self.pad = dil * (k - 1) // 2 if pad is None else pad

    def init(self, params, rng):
        fan_in = self.cin * self.k * self.k
        params[self.name + ".w"] = rng.normal((self.cout, fan_in), np.sqrt(2.0 / fan_in))
        params[self.name + ".b"] = np.zeros(self.cout)

    def forward(self, params, x):
        cols, ho, wo = im2col(x, self.k, self.stride, self.pad, self.dil)
        out = np.matmul(params[self.name + ".w"], cols) + params[self.name + ".b"][:, None]
        return out.reshape(x.shape[0], self.cout, ho, wo), (cols, x.shape)

    def backward(self, params, cache, g, grads):
        cols, x_shape = cache
        gf = g.reshape(g.shape[0], self.cout, -1)
        grads[self.name + ".w"] = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
        grads[self.name + ".b"] = gf.sum(axis=(0, 2))
        gcols = np.matmul(params[self.name + ".w"].T, gf)
        return col2im(gcols, x_shape, self.k, self.stride, self.pad, self.dil)
