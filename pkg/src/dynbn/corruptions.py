"""Procedural image corruptions, 11 types x 5 severities.

Every corruption is a pure function of (image, label, severity, seed).  Images
are H x W x C float arrays in [0, 1]; outputs are float32 and clamped to [0, 1].
The severity constants are listed in ``SEVERITY_PARAMS``.
"""
from __future__ import annotations

from enum import Enum, IntEnum

import numpy as np
from scipy.ndimage import convolve, gaussian_filter, map_coordinates

from .dataio import CorruptedCorpus, Dataset


class CorruptionLabel(IntEnum):
    NATURAL = 0
    GAUSSIAN_NOISE = 1
    SHOT_NOISE = 2
    IMPULSE_NOISE = 3
    DEFOCUS_BLUR = 4
    MOTION_BLUR = 5
    ZOOM_BLUR = 6
    FOG = 7
    BRIGHTNESS = 8
    CONTRAST = 9
    ELASTIC = 10
    PIXELATE = 11

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "CorruptionLabel":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown corruption {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"unknown corruption code {value!r}") from None


class CorruptionFamily(Enum):
    NOISE = "noise"
    BLUR = "blur"
    WEATHER = "weather"
    DIGITAL = "digital"


L = CorruptionLabel
FAMILY = {
    L.GAUSSIAN_NOISE: CorruptionFamily.NOISE,
    L.SHOT_NOISE: CorruptionFamily.NOISE,
    L.IMPULSE_NOISE: CorruptionFamily.NOISE,
    L.DEFOCUS_BLUR: CorruptionFamily.BLUR,
    L.MOTION_BLUR: CorruptionFamily.BLUR,
    L.ZOOM_BLUR: CorruptionFamily.BLUR,
    L.FOG: CorruptionFamily.WEATHER,
    L.BRIGHTNESS: CorruptionFamily.WEATHER,
    L.CONTRAST: CorruptionFamily.DIGITAL,
    L.ELASTIC: CorruptionFamily.DIGITAL,
    L.PIXELATE: CorruptionFamily.DIGITAL,
}
CORRUPTIONS = tuple(c for c in CorruptionLabel if c != L.NATURAL)
NOISE_LABELS = tuple(c for c in CORRUPTIONS if FAMILY[c] is CorruptionFamily.NOISE)
BLUR_LABELS = tuple(c for c in CORRUPTIONS if FAMILY[c] is CorruptionFamily.BLUR)
SEVERITIES = (1, 2, 3, 4, 5)

SEVERITY_PARAMS = {
    L.GAUSSIAN_NOISE: (0.04, 0.08, 0.12, 0.18, 0.26),
    L.SHOT_NOISE: (60, 25, 12, 5, 3),
    L.IMPULSE_NOISE: (0.03, 0.06, 0.09, 0.17, 0.27),
    L.DEFOCUS_BLUR: (0.8, 1.2, 1.6, 2.2, 3.0),
    L.MOTION_BLUR: (3, 5, 7, 9, 11),
    L.ZOOM_BLUR: (1.06, 1.11, 1.16, 1.21, 1.26),
    L.FOG: (0.15, 0.25, 0.35, 0.45, 0.55),
    L.BRIGHTNESS: (0.1, 0.2, 0.3, 0.4, 0.5),
    L.CONTRAST: (0.75, 0.5, 0.4, 0.3, 0.15),
    L.ELASTIC: (0.5, 1.0, 1.5, 2.0, 2.5),
    # (block size, mixing weight)
    L.PIXELATE: ((2, 0.5), (2, 1.0), (4, 0.5), (4, 1.0), (8, 0.5)),
}


# ---------------------------------------------------------------------------
# Kernels and fields
# ---------------------------------------------------------------------------

def disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Anti-aliased disk: each tap is the pixel area covered by the disk."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if radius < 0.5:
        return np.ones((1, 1))
    half = int(np.ceil(radius - 0.5))
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    taps = np.arange(-half, half + 1)
    pos = (taps[:, None] + sub[None, :]).ravel()
    yy, xx = np.meshgrid(pos, pos, indexing="ij")
    inside = (yy * yy + xx * xx <= radius * radius).astype(np.float64)
    n = 2 * half + 1
    k = inside.reshape(n, supersample, n, supersample).sum(axis=(1, 3))
    return k / k.sum()


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Line kernel of ``length`` unit-spaced taps at ``angle`` degrees, bilinearly splatted."""
    if length < 1:
        raise ValueError("length must be >= 1")
    half = (length - 1) / 2
    r = int(np.ceil(half)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    th = np.deg2rad(angle)
    t = np.arange(length) - half
    xs, ys = r + t * np.cos(th), r + t * np.sin(th)
    for x, y in zip(xs, ys):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if wx * wy > 0:
                    k[y0 + dy, x0 + dx] += wx * wy
    # trim empty borders symmetrically so the kernel stays centred
    while k.shape[0] > 1 and not k[0].any() and not k[-1].any():
        k = k[1:-1]
    while k.shape[1] > 1 and not k[:, 0].any() and not k[:, -1].any():
        k = k[:, 1:-1]
    return k / k.sum()


def plasma_field(h: int, w: int, roughness: float, seed: int) -> np.ndarray:
    """Diamond-square fractal noise, range-normalized to [0, 1]."""
    if h < 2 or w < 2:
        raise ValueError("plasma field needs at least 2x2")
    if not 0 < roughness <= 1:
        raise ValueError("roughness must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    size = 1
    while size + 1 < max(h, w):
        size *= 2
    n = size + 1
    g = np.zeros((n, n))
    g[::size, ::size] = rng.uniform(-1, 1, (2, 2))
    step, amp = size, 1.0
    while step > 1:
        half = step // 2
        amp *= roughness
        # diamond: centres of squares
        c = (g[:-1:step, :-1:step] + g[:-1:step, step::step]
             + g[step::step, :-1:step] + g[step::step, step::step]) / 4
        g[half::step, half::step] = c + rng.uniform(-amp, amp, c.shape)
        # square: edge midpoints, averaging available neighbours
        for y0, x0 in ((0, half), (half, 0)):
            ys, xs = np.arange(y0, n, step), np.arange(x0, n, step)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            acc = np.zeros(yy.shape)
            cnt = np.zeros(yy.shape)
            for dy, dx in ((-half, 0), (half, 0), (0, -half), (0, half)):
                ny, nx = yy + dy, xx + dx
                ok = (ny >= 0) & (ny < n) & (nx >= 0) & (nx < n)
                acc[ok] += g[ny[ok], nx[ok]]
                cnt += ok
            g[yy, xx] = acc / cnt + rng.uniform(-amp, amp, yy.shape)
        step = half
    g = g[:h, :w]
    lo, hi = g.min(), g.max()
    return (g - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Individual corruptions (x is float64 H x W x C)
# ---------------------------------------------------------------------------

def _per_channel(x, fn):
    return np.stack([fn(x[..., c]) for c in range(x.shape[-1])], axis=-1)


def _blur(x, kernel):
    return _per_channel(x, lambda ch: convolve(ch, kernel, mode="reflect"))


def _warp(x, ys, xs, mode="nearest"):
    return _per_channel(x, lambda ch: map_coordinates(ch, [ys, xs], order=1, mode=mode))


def zoom(x: np.ndarray, factor: float) -> np.ndarray:
    """Centre crop of 1/factor of the image, rescaled back with bilinear sampling."""
    h, w = x.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return _warp(x, cy + (yy - cy) / factor, cx + (xx - cx) / factor)


def pixelate(x: np.ndarray, block: int, weight: float = 1.0) -> np.ndarray:
    """Nearest-neighbour downscale by ``block`` then upscale, mixed with the input."""
    if block < 1:
        raise ValueError("block must be >= 1")
    if block == 1:
        return x.copy()
    h, w = x.shape[:2]
    small = x[block // 2::block, block // 2::block]
    big = np.repeat(np.repeat(small, block, axis=0), block, axis=1)[:h, :w]
    return (1 - weight) * x + weight * big


def _apply(x, label, p, rng):
    if label == L.GAUSSIAN_NOISE:
        return x + rng.normal(0.0, p, x.shape)
    if label == L.SHOT_NOISE:
        return rng.poisson(x * p) / p
    if label == L.IMPULSE_NOISE:
        hit = rng.random(x.shape) < p
        salt = rng.random(x.shape) < 0.5
        out = x.copy()
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
        return out
    if label == L.DEFOCUS_BLUR:
        return _blur(x, disk_kernel(p))
    if label == L.MOTION_BLUR:
        return _blur(x, motion_kernel(p, rng.uniform(0, 180)))
    if label == L.ZOOM_BLUR:
        factors = np.arange(1.0, p + 1e-9, 0.02)
        return sum(zoom(x, f) for f in factors) / len(factors)
    if label == L.FOG:
        field = plasma_field(x.shape[0], x.shape[1], 0.6, int(rng.integers(2**63)))
        return x * (1 - p) + p * field[..., None]
    if label == L.BRIGHTNESS:
        return x + p
    if label == L.CONTRAST:
        m = x.mean(axis=(0, 1), keepdims=True)
        return (x - m) * p + m
    if label == L.ELASTIC:
        h, w = x.shape[:2]
        disp = []
        for _ in range(2):
            d = gaussian_filter(rng.uniform(-1, 1, (h, w)), 4.0)
            disp.append(d * (p / np.abs(d).max()))
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return _warp(x, yy + disp[0], xx + disp[1], mode="reflect")
    if label == L.PIXELATE:
        block, weight = p
        return pixelate(x, block, weight)
    raise ValueError(f"unhandled corruption {label!r}")


def corrupt(img: np.ndarray, label, severity: int, seed: int) -> np.ndarray:
    """Apply corruption ``label`` at ``severity`` (1..5); ``natural`` is the identity."""
    label = CorruptionLabel.parse(label)
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    if label == L.NATURAL:
        return img.copy()
    rng = np.random.default_rng([int(seed) & (2**64 - 1), int(label), severity])
    out = _apply(np.asarray(img, dtype=np.float64), label, SEVERITY_PARAMS[label][severity - 1], rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def build_corrupted_dataset(dataset: Dataset, labels, severities=SEVERITIES, count: int = 100,
                            seed: int = 0, include_natural: bool = True) -> CorruptedCorpus:
    """``count`` records per (label, severity) cell, drawn without replacement per cell.

    With ``include_natural`` an uncorrupted ``natural`` cell is added for every
    severity as well, so 11 corruptions x 5 severities x 100 gives 5500
    corrupted records plus 500 natural ones.
    """
    if len(dataset) == 0:
        raise ValueError("source dataset is empty")
    if count > len(dataset):
        raise ValueError(f"need {count} source images per cell, dataset has {len(dataset)}")
    labels = [CorruptionLabel.parse(c) for c in labels]
    if include_natural and L.NATURAL not in labels:
        labels = [L.NATURAL] + labels
    root = np.random.SeedSequence(seed)
    cells = [(c, s) for c in labels for s in severities]
    imgs, classes, codes, sevs = [], [], [], []
    for (c, s), child in zip(cells, root.spawn(len(cells))):
        rng = np.random.default_rng(child)
        idx = rng.permutation(len(dataset))[:count]
        seeds = rng.integers(0, 2**63, size=count)
        for i, sd in zip(idx, seeds):
            imgs.append(corrupt(dataset.images[i], c, s, int(sd)))
        classes.append(dataset.labels[idx])
        codes.append(np.full(count, int(c)))
        sevs.append(np.full(count, s))
    return CorruptedCorpus(np.stack(imgs), np.concatenate(classes).astype(np.int64),
                           np.concatenate(codes).astype(np.int64),
                           np.concatenate(sevs).astype(np.int64),
                           {"seed": seed, "count": count})
