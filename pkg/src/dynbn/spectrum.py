"""Fourier-amplitude featurization.

The detector input for an image x is log(|F(x)| / eps_n + 1), where eps_n is
the mean amplitude spectrum of clean images.  Only columns 0..W//2 of the
unshifted spectrum are kept (the rest is redundant for real input) and the
result is flattened row-major.  fftshift is applied only when exporting
spectra for display.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import CorruptedCorpus, read_container, write_container
from .numerics import ShapeError, amplitude, avgpool2d, fft2, fftshift

EPS_FLOOR = 1e-8


class GeometryError(ShapeError):
    pass


@dataclass
class NaturalSpectrum:
    grid: np.ndarray  # float32 (H, W), strictly positive
    count: int
    channel: str = "first"

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def feature_length(self) -> int:
        h, w = self.grid.shape
        return h * (w // 2 + 1)


def _channel_planes(images: np.ndarray, channel: str) -> np.ndarray:
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) images, got {images.shape}")
    if channel == "first":
        return images[..., 0]
    if channel == "mean":
        return images.mean(axis=-1)
    raise ValueError(f"unknown channel mode {channel!r}")


def _fit_geometry(planes: np.ndarray, target: tuple[int, int] | None) -> np.ndarray:
    """Average-pool (kernel 2, stride 2) inputs that are twice the target size."""
    hw = planes.shape[-2:]
    if target is None or hw == tuple(target):
        return planes
    if (hw[0] // 2, hw[1] // 2) == tuple(target):
        return avgpool2d(planes[:, None], 2, 2)[:, 0]
    raise GeometryError(f"image grid {hw} does not match spectrum grid {tuple(target)}")


def amplitude_spectra(images: np.ndarray, channel: str = "first",
                      target: tuple[int, int] | None = None) -> np.ndarray:
    """|F(x)| for each image, shape (N, H, W), float64."""
    planes = _fit_geometry(_channel_planes(np.asarray(images), channel), target)
    return amplitude(fft2(planes))


def mean_amplitude(images, channel: str = "first", pool: bool = False,
                   batch: int = 1024) -> NaturalSpectrum:
    """Elementwise mean amplitude spectrum of clean images, floored at 1e-8."""
    images = getattr(images, "images", images)
    n = len(images)
    if n == 0:
        raise ValueError("cannot estimate a spectrum from an empty dataset")
    total = None
    for start in range(0, n, batch):
        planes = _channel_planes(images[start:start + batch], channel)
        if pool:
            planes = avgpool2d(planes[:, None], 2, 2)[:, 0]
        s = amplitude(fft2(planes)).sum(axis=0)
        total = s if total is None else total + s
    grid = np.maximum(total / n, EPS_FLOOR).astype(np.float32)
    return NaturalSpectrum(grid, n, channel)


def normalize_spectrum(amp: np.ndarray, eps) -> np.ndarray:
    """log(amp / eps + 1), elementwise; broadcasts over leading axes."""
    grid = eps.grid if isinstance(eps, NaturalSpectrum) else np.asarray(eps)
    if amp.shape[-2:] != grid.shape:
        raise ShapeError(f"spectrum shape {amp.shape[-2:]} != eps shape {grid.shape}")
    return np.log1p(amp / grid.astype(np.float64))


def half_spectrum(grid: np.ndarray) -> np.ndarray:
    w = grid.shape[-1]
    return grid[..., : w // 2 + 1]


def extract_features(images: np.ndarray, eps: NaturalSpectrum) -> np.ndarray:
    """Feature matrix (N, H * (W//2 + 1)), float32."""
    amp = amplitude_spectra(images, eps.channel, eps.shape)
    feats = half_spectrum(normalize_spectrum(amp, eps))
    return feats.reshape(len(feats), -1).astype(np.float32)


def extract_feature(img: np.ndarray, eps: NaturalSpectrum) -> np.ndarray:
    if img.ndim != 3:
        raise ShapeError(f"expected a single H x W x C image, got {img.shape}")
    return extract_features(img[None], eps)[0]


def mean_corruption_spectrum(corpus: CorruptedCorpus, eps: NaturalSpectrum, labels=None,
                             clamp_at_one: bool = True) -> dict[int, np.ndarray]:
    """Normalized mean amplitude per corruption label, fftshifted for display.

    Returns {label code: (H, W) grid}; values are clamped to [0, 1] when
    ``clamp_at_one`` is set.
    """
    present = set(corpus.labels_present())
    labels = sorted(present) if labels is None else [int(c) for c in labels]
    out = {}
    for c in labels:
        if c not in present:
            raise ValueError(f"corpus has no records for label {c}")
        sub = corpus.by_label(c)
        mean_amp = amplitude_spectra(sub.images, eps.channel, eps.shape).mean(axis=0)
        grid = fftshift(normalize_spectrum(mean_amp, eps))
        if clamp_at_one:
            grid = np.clip(grid, 0.0, 1.0)
        out[c] = grid
    return out


def to_p2(grid: np.ndarray, vmax: float | None = None) -> str:
    """Plain-text grayscale grid: 'P2', 'W H', '255', then one row per line."""
    if vmax is None:
        vmax = float(grid.max()) or 1.0
    levels = np.clip(np.rint(grid / vmax * 255), 0, 255).astype(int)
    h, w = grid.shape
    rows = [" ".join(map(str, r)) for r in levels]
    return "\n".join(["P2", f"{w} {h}", "255", *rows]) + "\n"


def read_p2(text: str) -> np.ndarray:
    tokens = text.split()
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a P2 grid")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:], dtype=int)
    if vals.size != w * h:
        raise ValueError(f"expected {w * h} values, found {vals.size}")
    return vals.reshape(h, w)


def save_spectrum(path, eps: NaturalSpectrum) -> None:
    write_container(path, "spectrum", {
        "grid": eps.grid.astype(np.float32),
        "count": np.array([eps.count], dtype=np.int32),
        "channel": np.frombuffer(eps.channel.encode(), dtype=np.uint8),
    })


def load_spectrum(path) -> NaturalSpectrum:
    c = read_container(path, "spectrum")
    return NaturalSpectrum(c["grid"], int(c["count"][0]), c["channel"].tobytes().decode())


def export_spectra(directory, grids: dict[int, np.ndarray], names: dict[int, str]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for code, grid in grids.items():
        p = directory / f"{names.get(code, str(code))}.pgm"
        p.write_text(to_p2(grid, 1.0 if grid.max() <= 1.0 else None))
        paths.append(p)
    return paths
