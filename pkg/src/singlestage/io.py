"""File formats: TNSR tensors, indexed PNG label maps, JSON run configs."""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .gate import GateConfig
from .numerics import ParameterError
from .pamr import PamrConfig
from .scores import FocalConfig, NgwpConfig
from .toytrain.data import ToyDatasetConfig
from .toytrain.model import ModelConfig
from .toytrain.train import TrainConfig

MAGIC = b"TNSR"
VERSION = 1
DTYPE_F32 = 1


class FormatError(ValueError):
    """Malformed input file; the message names the file and the problem."""


# ---------------------------------------------------------------- TNSR

def encode_tnsr(t) -> bytes:
    arr = np.asarray(t, dtype="<f4")
    header = MAGIC + struct.pack("<BBI", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tnsr(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError(f"{name}: not a TNSR file (bad magic)")
    version, dtype, rank = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported TNSR version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{name}: unsupported dtype code {dtype}")
    off = 10 + 4 * rank
    if len(buf) < off:
        raise FormatError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 10)
    expect = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != expect:
        raise FormatError(f"{name}: payload has {len(buf) - off} bytes, dims {dims} need {expect}")
    return np.reshape(np.frombuffer(buf, dtype="<f4", offset=off), dims).astype(np.float32)


def save_tnsr(path, t) -> None:
    Path(path).write_bytes(encode_tnsr(t))


def load_tnsr(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read ({e.strerror})") from e
    return decode_tnsr(buf, str(path))


# ---------------------------------------------------------------- images

def voc_palette(n: int = 256) -> np.ndarray:
    """(n, 3) uint8 colour map; class bits are spread over the high bits of R, G, B."""
    pal = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def save_label_png(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label map must be 2-D with values in 0..255")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(voc_palette().ravel().tolist())
    img.save(path, optimize=False)


def load_rgb(path) -> np.ndarray:
    """(3, H, W) float64 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot decode image ({e})") from e
    return arr.transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------- run config

_SECTIONS = {
    "gate": GateConfig, "focal": FocalConfig, "ngwp": NgwpConfig,
    "pamr": PamrConfig, "model": ModelConfig, "dataset": ToyDatasetConfig,
}


def _public_fields(cls):
    return {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _type_error(key, value, default):
    """None if ``value`` is acceptable where ``default`` lives, else a message."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "a string"
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        want = "a list of integers"
    else:
        return None
    return None if ok else f"{key} must be {want}, got {value!r}"


def _build(cls, doc, prefix, errors):
    """Well-typed entries of ``doc`` as kwargs; everything else goes to ``errors``."""
    if not isinstance(doc, dict):
        errors.append(f"{prefix.rstrip('.') or 'config'} must be a JSON object")
        return {}
    fields = _public_fields(cls)
    kwargs = {}
    for key in sorted(set(doc) - set(fields)):
        errors.append(f"unknown key {prefix}{key}")
    for name, f in fields.items():
        if name not in doc:
            continue
        if name in _SECTIONS:
            kwargs[name] = doc[name]
            continue
        msg = _type_error(prefix + name, doc[name], _default(f))
        if msg:
            errors.append(msg)
        else:
            kwargs[name] = tuple(doc[name]) if isinstance(doc[name], list) else doc[name]
    return kwargs


def _check(cls, kwargs, prefix, errors):
    """Instantiate if possible; violations are recorded with their section prefix."""
    probe = {n: _default(f) for n, f in _public_fields(cls).items()}
    probe.update(kwargs)
    inst = object.__new__(cls)
    for n, v in probe.items():
        object.__setattr__(inst, n, v)
    for f in dataclasses.fields(cls):
        if f.name not in probe:
            object.__setattr__(inst, f.name, _default(f))
    found = [prefix + e for e in inst.violations()]
    errors.extend(found)
    return None if found else cls(**kwargs)


def parse_run_config(doc: dict) -> TrainConfig:
    """TrainConfig from a decoded JSON document.

    Missing keys keep their defaults. Every problem found is reported in one
    ParameterError, one violation per line.
    """
    errors: list[str] = []
    top = _build(TrainConfig, doc, "", errors)
    for name, cls in _SECTIONS.items():
        if name in top:
            sub = _build(cls, top[name], name + ".", errors)
            top[name] = _check(cls, sub, name + ".", errors)
    plain = {k: v for k, v in top.items() if k not in _SECTIONS}
    _check(TrainConfig, plain, "", errors)
    if errors:
        raise ParameterError("\n".join(errors))
    return TrainConfig(**top)


def load_run_config(path) -> TrainConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise FormatError(f"{path}: cannot read ({e.strerror})") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    try:
        return parse_run_config(doc)
    except ParameterError as e:
        raise ParameterError(f"{path}:\n{e}") from None


def run_config_dict(cfg: TrainConfig) -> dict:
    """JSON-ready dict; ``parse_run_config`` inverts it."""
    out = {}
    for name in _public_fields(TrainConfig):
        v = getattr(cfg, name)
        if name in _SECTIONS:
            v = {k: getattr(v, k) for k in _public_fields(type(v))}
            v = {k: list(x) if isinstance(x, tuple) else x for k, x in v.items()}
        out[name] = v
    return out


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
