"""Pixel-adaptive mask refinement and pseudo ground-truth extraction.

Neighbourhoods are the 8 off-centre taps of one dilated 3x3 kernel per
dilation rate. Taps falling outside the image are dropped from the softmax
support rather than padded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError, ShapeError

IGNORE = 255

_RING = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class PamrConfig:
    dilations: tuple[int, ...] = (1, 2, 4, 8, 12, 24)
    iterations: int = 10
    sigma_floor: float = 1e-3
    fg_threshold: float = 0.6
    bg_threshold: float = 0.7
    # "channel": thresholds relative to each channel's own spatial max;
    # "global": relative to the max over all channels.
    threshold_base: str = "channel"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(x) for x in self.dilations))
        errors = self.violations()
        if errors:
            raise ParameterError("; ".join(errors))

    def violations(self) -> list[str]:
        d, errs = self.dilations, []
        if not d or any(x <= 0 for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            errs.append(f"dilations must be positive and strictly increasing, got {d}")
        if self.iterations < 0:
            errs.append(f"iterations must be >= 0, got {self.iterations}")
        if self.sigma_floor <= 0:
            errs.append("sigma_floor must be > 0")
        for name in ("fg_threshold", "bg_threshold"):
            if not 0.0 < getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in (0, 1], got {getattr(self, name)}")
        if self.threshold_base not in ("channel", "global"):
            errs.append(f"unknown threshold_base {self.threshold_base!r}")
        return errs


def neighbour_offsets(dilations) -> np.ndarray:
    """(N, 2) table of (dy, dx) offsets, dilation-major."""
    return np.array([(dy * d, dx * d) for d in dilations for dy, dx in _RING], dtype=np.int64)


def _shift(x: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    """out[..., i, j] = x[..., i+dy, j+dx], ``fill`` where out of bounds."""
    h, w = x.shape[-2:]
    out = np.full_like(x, fill)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = x[..., ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def _inbounds(h: int, w: int, offsets: np.ndarray) -> np.ndarray:
    """(N, h, w) boolean mask of taps that land inside the image."""
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    return np.stack([((ii + dy >= 0) & (ii + dy < h) & (jj + dx >= 0) & (jj + dx < w))
                     for dy, dx in offsets])


def local_sigma(image: np.ndarray, cfg: PamrConfig = PamrConfig()) -> np.ndarray:
    """Per-pixel, per-channel population std over the kernel support (centre + taps)."""
    if image.ndim != 3:
        raise ShapeError(f"image must be (3, h, w), got {image.shape}")
    h, w = image.shape[-2:]
    offsets = neighbour_offsets(cfg.dilations)
    count = np.ones((h, w))
    s1 = image.copy()
    s2 = image ** 2
    valid = _inbounds(h, w, offsets)
    for n, (dy, dx) in enumerate(offsets):
        v = _shift(image, dy, dx)
        s1 += v
        s2 += v * v
        count += valid[n]
    mean = s1 / count
    var = np.maximum(s2 / count - mean ** 2, 0.0)
    return np.maximum(np.sqrt(var), cfg.sigma_floor)


@dataclass
class AffinityField:
    weights: np.ndarray  # (N, h, w), zero on out-of-bounds taps
    offsets: np.ndarray  # (N, 2)
    valid: np.ndarray = field(repr=False)  # (N, h, w) bool

    @property
    def shape(self):
        return self.weights.shape[-2:]

    @property
    def isolated(self) -> np.ndarray:
        """Pixels with no in-bounds tap; refinement leaves them unchanged."""
        return ~self.valid.any(axis=-3)

    def to_sparse(self):
        """Row-stochastic (hw x hw) CSR operator equivalent to one refinement step."""
        import scipy.sparse as sp

        n_taps, h, w = self.weights.shape
        pix = np.arange(h * w).reshape(h, w)
        rows, cols, vals = [], [], []
        for n, (dy, dx) in enumerate(self.offsets):
            v = self.valid[n]
            rows.append(pix[v])
            cols.append((pix + dy * w + dx)[v])
            vals.append(self.weights[n][v])
        iso = self.isolated
        rows.append(pix[iso])
        cols.append(pix[iso])
        vals.append(np.ones(int(iso.sum())))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(h * w, h * w))


def affinity(image: np.ndarray, cfg: PamrConfig = PamrConfig()) -> AffinityField:
    """Softmax over in-bounds neighbours of the channel-averaged kernel -|dI|/sigma^2."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    offsets = neighbour_offsets(cfg.dilations)
    valid = _inbounds(h, w, offsets)
    var = local_sigma(image, cfg) ** 2
    k = np.empty((len(offsets), h, w))
    for n, (dy, dx) in enumerate(offsets):
        k[n] = (-np.abs(image - _shift(image, dy, dx)) / var).mean(axis=0)
    k = np.where(valid, k, -np.inf)
    has_nb = valid.any(axis=0)
    k -= np.where(has_nb, k.max(axis=0), 0.0)
    e = np.where(valid, np.exp(k), 0.0)
    total = np.where(has_nb, e.sum(axis=0), 1.0)
    return AffinityField(weights=e / total, offsets=offsets, valid=valid)


def stack_affinities(fields) -> AffinityField:
    """Batch same-sized affinity fields for :func:`refine` on a (B, C, h, w) mask."""
    fields = list(fields)
    return AffinityField(weights=np.stack([f.weights for f in fields]), offsets=fields[0].offsets,
                         valid=np.stack([f.valid for f in fields]))


def refine(mask: np.ndarray, aff: AffinityField, iterations: int) -> np.ndarray:
    """Iterated convex re-averaging of the mask with affinity weights.

    Every step reads only the previous iterate. Not differentiated. A batched
    field (B, N, h, w) pairs with a (B, C, h, w) mask.
    """
    if iterations < 0:
        raise ParameterError(f"iterations must be >= 0, got {iterations}")
    if mask.shape[-2:] != aff.shape:
        raise ShapeError(f"mask {mask.shape} and affinity {aff.weights.shape} disagree spatially")
    m = np.array(mask, dtype=np.float64)
    if iterations == 0:
        return m
    h, w = aff.shape
    # Each tap only touches the rectangle where its neighbour is in bounds;
    # out-of-bounds weights are zero, so skipping them changes nothing.
    taps = []
    for n, (dy, dx) in enumerate(aff.offsets):
        ys, ye = max(0, -dy), min(h, h - dy)
        xs, xe = max(0, -dx), min(w, w - dx)
        if ys < ye and xs < xe:
            wn = aff.weights[..., n, None, ys:ye, xs:xe]
            taps.append((wn, (slice(ys, ye), slice(xs, xe)), (slice(ys + dy, ye + dy), slice(xs + dx, xe + dx))))
    iso = aff.isolated[..., None, :, :]
    for _ in range(iterations):
        nxt = np.zeros_like(m)
        for wn, dst, src in taps:
            nxt[..., dst[0], dst[1]] += wn * m[..., src[0], src[1]]
        m = np.where(iso, m, nxt) if iso.any() else nxt
    return m


def refine_sparse(mask: np.ndarray, op, iterations: int) -> np.ndarray:
    """Same iteration as :func:`refine`, driven by :meth:`AffinityField.to_sparse`.

    Agrees with :func:`refine` to rounding; used by the training loop for speed.
    """
    if iterations < 0:
        raise ParameterError(f"iterations must be >= 0, got {iterations}")
    c, h, w = mask.shape
    x = np.ascontiguousarray(mask.reshape(c, h * w).T)
    for _ in range(iterations):
        x = op @ x
    return np.ascontiguousarray(x.T).reshape(c, h, w)


@dataclass
class PseudoLabels:
    labels: np.ndarray  # (h, w) int, values in 0..C or IGNORE
    valid: bool
    n_classes: int  # C, excluding background

    @property
    def counts(self) -> np.ndarray:
        """Labelled pixel count per channel 0..C."""
        lab = self.labels[self.labels != IGNORE]
        return np.bincount(lab.ravel(), minlength=self.n_classes + 1)[: self.n_classes + 1]

    @property
    def total(self) -> int:
        return int((self.labels != IGNORE).sum())


def extract_pseudo_gt(refined: np.ndarray, present, cfg: PamrConfig = PamrConfig()) -> PseudoLabels:
    """Hard labels from relative-confidence thresholds on a refined mask.

    ``present`` is the binary image-level label vector of length C.
    """
    present = np.asarray(present).astype(bool)
    n_cls = refined.shape[0] - 1
    if present.shape != (n_cls,):
        raise ShapeError(f"label vector of length {present.shape} for {n_cls} classes")
    m = refined.copy()
    m[1:][~present] = 0.0
    if cfg.threshold_base == "global":
        peak = np.full(n_cls + 1, m.max())
    else:
        peak = m.reshape(n_cls + 1, -1).max(axis=1)
    ratio = np.full(n_cls + 1, cfg.fg_threshold)
    ratio[0] = cfg.bg_threshold
    confident = m > (ratio * peak)[:, None, None]
    n_conf = confident.sum(axis=0)
    labels = np.where(n_conf == 1, confident.argmax(axis=0), IGNORE).astype(np.int64)
    per_class = np.bincount(labels[labels != IGNORE].ravel(), minlength=n_cls + 1)[1:]
    valid = bool(np.all(per_class[present] > 0))
    return PseudoLabels(labels=labels, valid=valid, n_classes=n_cls)
