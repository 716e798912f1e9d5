"""Synthetic labelled-shapes images: a stand-in for a weakly labelled photo set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ParameterError, Rng

SHAPES = ("disk", "square", "triangle")


@dataclass(frozen=True)
class ToyDatasetConfig:
    n_images: int = 160
    image_size: int = 48
    n_classes: int = 3
    max_objects: int = 2
    color_noise: float = 0.04
    texture_noise: float = 0.05
    min_radius: int = 7
    max_radius: int = 12
    seed: int = 0

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if self.n_images <= 0:
            errs.append(f"n_images must be positive, got {self.n_images}")
        if not 1 <= self.n_classes <= len(SHAPES):
            errs.append(f"n_classes must be in 1..{len(SHAPES)}")
        if self.image_size < 16 or self.image_size % 4:
            errs.append("image_size must be a multiple of 4 and at least 16")
        if not 1 <= self.max_objects <= self.n_classes:
            errs.append("max_objects must be in 1..n_classes")
        if not 0 < self.min_radius <= self.max_radius < self.image_size // 2:
            errs.append("need 0 < min_radius <= max_radius < image_size/2")
        if self.color_noise < 0 or self.texture_noise < 0:
            errs.append("noise levels must be >= 0")
        return errs


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 3, S, S) in [0, 1]
    masks: np.ndarray  # (N, S, S) int, 0 = background, c = class c
    labels: np.ndarray  # (N, C) binary image-level labels

    def __len__(self):
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(self.images[idx], self.masks[idx], self.labels[idx])


# Per-class hue centres; within-class hue jitter keeps colour a weak cue only.
_CLASS_HUES = (0.0, 0.33, 0.62)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: str, cy: float, cx: float, r: float, angle: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "square":
        half = r * 0.85
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle, circumradius 1.3r so its area is close to the disk's
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = angle + np.pi / 2 + 2 * np.pi * k / 3
        inside &= (np.cos(a) * dx + np.sin(a) * dy) <= 0.65 * r
    return inside


def _render(rng: Rng, cfg: ToyDatasetConfig, classes: list[int]):
    s = cfg.image_size
    bg_hue = rng.uniform(0.0, 1.0)
    bg = _hsv_to_rgb(bg_hue, rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.6))
    yy, xx = np.mgrid[0:s, 0:s] / s
    gy, gx = rng.uniform(-0.1, 0.1, 2)
    img = bg[:, None, None] + (gy * yy + gx * xx)[None]
    mask = np.zeros((s, s), dtype=np.int64)
    for c in classes:
        for _ in range(50):
            r = rng.uniform(cfg.min_radius, cfg.max_radius)
            cy, cx = rng.uniform(r + 1, s - r - 1, 2)
            shape = _shape_mask(SHAPES[c], cy, cx, r, rng.uniform(0, 2 * np.pi), s)
            # objects must not overlap much so each class stays visible
            if (mask[shape] > 0).mean() < 0.1:
                break
        hue = (_CLASS_HUES[c] + rng.uniform(-0.08, 0.08)) % 1.0
        col = _hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.7, 1.0))
        img[:, shape] = col[:, None]
        mask[shape] = c + 1
    img += rng.normal((3, 1, 1), cfg.color_noise)
    img += rng.normal((1, s, s), cfg.texture_noise)
    return np.clip(img, 0.0, 1.0), mask


def gen_dataset(cfg: ToyDatasetConfig) -> ToyDataset:
    """Deterministic per seed. Class presence cycles so every class is well represented."""
    rng = Rng(cfg.seed)
    n, s, c = cfg.n_images, cfg.image_size, cfg.n_classes
    images = np.empty((n, 3, s, s))
    masks = np.empty((n, s, s), dtype=np.int64)
    labels = np.zeros((n, c))
    for i in range(n):
        k = int(rng.integers(1, cfg.max_objects + 1))
        # the first class is forced round-robin so each appears in >= n/c images
        others = [x for x in rng.permutation(c).tolist() if x != i % c]
        classes = [i % c] + others[: k - 1]
        img, m = _render(rng, cfg, classes)
        images[i], masks[i] = img, m
        present = np.unique(m)
        labels[i, present[present > 0] - 1] = 1.0
    return ToyDataset(images, masks, labels)
