"""Synthetic lesion datasets, PGM/PPM ingestion, resizing and splitting.

Dataset directories look like::

    index.txt            one sample id per line
    images/<id>.ppm      8-bit colour image
    masks/<id>.pgm       8-bit label map (0/1, or 0/255 for binary)
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, ParseError
from .serialize import load_tensor, save_tensor


@dataclass
class Sample:
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    mask: np.ndarray    # (H, W) uint8 labels
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InputError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise InputError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ")


@dataclass(frozen=True)
class SynthSpec:
    count: int = 200
    size: int = 256
    mean_diameter: float = 144.0
    spread: float = 0.25
    noise: float = 0.08
    contrast: tuple = (0.2, 0.4)
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.count < 1:
            raise InputError("count must be >= 1")
        if not 0 < self.mean_diameter < self.size:
            raise InputError(f"mean_diameter must lie in (0, {self.size})")
        if not 0 <= self.spread < 1:
            raise InputError("spread must lie in [0, 1)")
        return self


def _synth_one(spec: SynthSpec, rng: np.random.Generator, idx: int) -> Sample:
    n = spec.size
    max_d = 0.9 * n
    diameter = min(spec.mean_diameter * (1 + spec.spread * rng.uniform(-1, 1)), max_d)
    diameter = max(diameter, 4.0)
    aspect = rng.uniform(0.7, 1.0 / 0.7)
    # semi-axes with a*b = (d/2)^2 so the equivalent diameter is d
    a = diameter / 2 * math.sqrt(aspect)
    b = diameter / 2 / math.sqrt(aspect)
    theta = rng.uniform(0, math.pi)
    reach = max(a, b)
    lo, hi = reach + 1, n - reach - 1
    if lo >= hi:
        cy = cx = n / 2
    else:
        cy, cx = rng.uniform(lo, hi), rng.uniform(lo, hi)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    if not mask.any():
        mask[int(cy), int(cx)] = 1

    background = rng.uniform(0.25, 0.45)
    contrast = rng.uniform(*spec.contrast)
    blur = max(n / 128.0, 0.5)
    field = background + contrast * gaussian_filter(mask.astype(np.float64), blur)
    field += gaussian_filter(rng.normal(0, 1, (n, n)), n / 32.0) * 0.03
    speckle = 1 + spec.noise * gaussian_filter(rng.normal(0, 1, (n, n)), 0.7) * 2
    gray = np.clip(field * speckle, 0, 1)
    tint = np.array([1.0, 0.97, 0.94])[:, None, None]
    image = np.clip(gray[None] * tint, 0, 1).astype(np.float32)
    return Sample(image, mask, id=f"synth{idx:05d}")


def synth_generate(spec: SynthSpec) -> list:
    """Deterministic ellipse-lesion samples; each draws from its own sub-seed."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    return [_synth_one(spec, np.random.default_rng(s), i) for i, s in enumerate(children)]


def equivalent_diameter(mask) -> float:
    return 2 * math.sqrt(float(np.asarray(mask).sum()) / math.pi)


# ---------------------------------------------------------------- PNM files

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm(buf: bytes):
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    pos = 2
    vals = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if not m or not m.group(1).isdigit():
            raise ParseError("malformed header", pos)
        vals.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    w, h, maxval = vals
    if maxval != 255:
        raise ParseError(f"maxval must be 255, got {maxval}", pos)
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise ParseError(f"truncated payload: {len(buf) - pos} of {need} bytes", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return magic, data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    """Raw uint8 pixels: (H, W) for P5, (H, W, 3) for P6."""
    return _parse_pnm(Path(path).read_bytes())[1].copy()


def write_pnm(path: Union[str, Path], pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Image as float32 in [0, 1]: (3, H, W) for P6, (H, W) for P5, raw for .mutr."""
    path = Path(path)
    if path.suffix == ".mutr":
        return load_tensor(path)
    px = read_pnm(path)
    arr = px.astype(np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy() if arr.ndim == 3 else arr


def save_image(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".mutr":
        save_tensor(path, np.asarray(image))
        return
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    write_pnm(path, q.transpose(1, 2, 0) if q.ndim == 3 else q)


def load_mask(path: Union[str, Path]) -> np.ndarray:
    px = read_pnm(path)
    if px.ndim == 3:
        px = px[..., 0]
    if px.max(initial=0) == 255 and np.isin(px, (0, 255)).all():
        px = (px // 255).astype(np.uint8)
    return px


def save_mask(path: Union[str, Path], mask: np.ndarray) -> None:
    write_pnm(path, np.asarray(mask, dtype=np.uint8))


def save_dataset(root: Union[str, Path], samples) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(root / "images" / f"{s.id}.ppm", s.image)
        save_mask(root / "masks" / f"{s.id}.pgm", s.mask)
    (root / "index.txt").write_text("".join(f"{s.id}\n" for s in samples))


def load_dataset(root: Union[str, Path]) -> list:
    root = Path(root)
    index = root / "index.txt"
    if not index.exists():
        raise InputError(f"no dataset index at {index}")
    out = []
    for sid in index.read_text().split():
        out.append(Sample(load_image(root / "images" / f"{sid}.ppm"),
                          load_mask(root / "masks" / f"{sid}.pgm"), id=sid))
    return out


# ---------------------------------------------------------------- resize / split

def _bilinear_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - frac) + np.take(a, i1, axis=axis) * frac


def resize_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel bilinear resize of a (C, H, W) array."""
    out = _bilinear_axis(image.astype(np.float64), h, 1)
    return _bilinear_axis(out, w, 2).astype(image.dtype)


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize so labels stay integral."""
    ri = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
    ci = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
    return mask[ri][:, ci]


def resize_sample(sample: Sample, target: int) -> Sample:
    if target < 16 or target % 16:
        raise InputError(f"target size must be a positive multiple of 16, got {target}")
    if sample.mask.shape == (target, target):
        return sample
    return Sample(resize_image(sample.image, target, target), resize_mask(sample.mask, target, target),
                  id=sample.id)


def split(samples, ratio: float = 0.7, seed: int = 0):
    """Seeded shuffle-then-cut into (train, val)."""
    if not 0 < ratio < 1:
        raise InputError(f"ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = int(round(ratio * len(samples)))
    return [samples[i] for i in order[:cut]], [samples[i] for i in order[cut:]]
