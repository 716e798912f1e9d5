"""Miniature two-stream segmentation network.

conv1 -> conv2 (stride 2) gives the shallow stream; conv3 (stride 2) ->
conv4 (dilated) upsampled x2 gives the deep stream. The two meet in the
stochastic gate (optionally after global cue injection) and a 1x1 head
produces C score maps at half the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gate import GateConfig, GciParams, gate_infer, gate_train, gate_train_backward, gci, gci_backward
from ..numerics import ParameterError, Rng, upsample_nearest, upsample_nearest_backward
from .layers import Conv2d

OUTPUT_STRIDE = 2


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    deep_width: int = 32

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        return [f"{k} must be >= 1" for k in ("width", "deep_width") if getattr(self, k) < 1]


class ToyNet:
    def __init__(self, n_classes: int, gate: GateConfig, cfg: ModelConfig = ModelConfig()):
        k, kd = cfg.width, cfg.deep_width
        self.n_classes, self.gate, self.k = n_classes, gate, k
        self.conv1 = Conv2d("conv1", 3, k)
        self.conv2 = Conv2d("conv2", k, k, stride=2)
        self.conv3 = Conv2d("conv3", k, kd, stride=2)
        self.conv4 = Conv2d("conv4", kd, k, dil=2)
        self.head = Conv2d("head", k, n_classes, k=1)
        self.convs = [self.conv1, self.conv2, self.conv3, self.conv4, self.head]
        self.params: dict[str, np.ndarray] = {}

    def init(self, rng: Rng) -> "ToyNet":
        for conv in self.convs:
            conv.init(self.params, rng)
        g = GciParams.init(self.k, rng)
        self.params.update({"gci.ew": g.expand_w, "gci.eb": g.expand_b,
                            "gci.pw": g.project_w, "gci.pb": g.project_b})
        return self

    def _gci_params(self):
        p = self.params
        return GciParams(p["gci.ew"], p["gci.eb"], p["gci.pw"], p["gci.pb"])

    def forward(self, x: np.ndarray, train: bool = False, rng: Rng | None = None):
        """(B, 3, H, W) images -> (B, C, H/2, W/2) score maps and a backward cache."""
        p, cache = self.params, {}
        a1, cache["c1"] = self.conv1.forward(p, x)
        h1 = np.maximum(a1, 0.0)
        a2, cache["c2"] = self.conv2.forward(p, h1)
        x_s = np.maximum(a2, 0.0)
        a3, cache["c3"] = self.conv3.forward(p, x_s)
        h3 = np.maximum(a3, 0.0)
        a4, cache["c4"] = self.conv4.forward(p, h3)
        x_d = upsample_nearest(np.maximum(a4, 0.0), 2)
        shallow = x_s
        if self.gate.gci_enabled:
            shallow, cache["gci"] = gci(x_d, x_s, self._gci_params(), return_cache=True)
        if train:
            mixed, cache["r"] = gate_train(x_d, shallow, self.gate, rng, return_draw=True)
        else:
            mixed = gate_infer(x_d, shallow, self.gate)
        scores, cache["head"] = self.head.forward(p, mixed)
        cache.update(a1=a1, a2=a2, a3=a3, a4=a4)
        return scores, cache

    def backward(self, cache, g_scores) -> dict[str, np.ndarray]:
        """Parameter gradients from the gradient of the score maps (training forward only)."""
        p, grads = self.params, {}
        g_mixed = self.head.backward(p, cache["head"], g_scores, grads)
        g_xd, g_sh = gate_train_backward(cache["r"], self.gate, g_mixed)
        if self.gate.gci_enabled:
            gd2, g_xs, gp = gci_backward(self._gci_params(), cache["gci"], g_sh)
            g_xd = g_xd + gd2
            grads.update({"gci.ew": gp.expand_w, "gci.eb": gp.expand_b,
                          "gci.pw": gp.project_w, "gci.pb": gp.project_b})
        else:
            g_xs = g_sh
            for name in ("gci.ew", "gci.eb", "gci.pw", "gci.pb"):
                grads[name] = np.zeros_like(p[name])
        g_a4 = upsample_nearest_backward(g_xd, 2) * (cache["a4"] > 0)
        g_h3 = self.conv4.backward(p, cache["c4"], g_a4, grads)
        g_xs = g_xs + self.conv3.backward(p, cache["c3"], g_h3 * (cache["a3"] > 0), grads)
        g_h1 = self.conv2.backward(p, cache["c2"], g_xs * (cache["a2"] > 0), grads)
        self.conv1.backward(p, cache["c1"], g_h1 * (cache["a1"] > 0), grads)
        return grads
