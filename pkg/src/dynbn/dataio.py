"""Datasets and persistence.

* ``Dataset`` / ``CorruptedCorpus``: in-memory containers, images are
  (N, H, W, C) float32 in [0, 1].
* CIFAR-10 binary batches (``data_batch_*.bin``): one label byte followed by
  3072 pixel bytes (1024 R, 1024 G, 1024 B, each row-major).
* ``gen_synthetic``: a procedurally rendered 10-class shape dataset so the
  whole pipeline runs without downloads.
* The BNAD container, used for every binary artifact::

      b"BNAD" | version u16 | kind (u16 len + utf8) | n_chunks u32
      per chunk: name (u16 len + utf8) | dtype u8 | ndim u8 | dims u32 * ndim | payload
      CRC-32 (u32) of every preceding byte

  All integers and payloads are little-endian.  dtype codes: 0 float32,
  1 int32, 2 uint8.
"""
from __future__ import annotations

import io
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IMAGE_SHAPE = (32, 32, 3)
CIFAR_RECORD = 1 + 32 * 32 * 3
N_CLASSES = 10
SYNTHETIC_CLASSES = ("disk", "square", "triangle", "cross", "ring", "hbar", "vbar",
                     "checker", "stripes", "ramp_blob")


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("class labels must lie in [0, 10)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split if split is None else split)


@dataclass
class CorruptedCorpus:
    """Records of (image, class label, corruption code, severity)."""

    images: np.ndarray
    classes: np.ndarray
    corruptions: np.ndarray
    severities: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.classes)

    def select(self, mask) -> "CorruptedCorpus":
        return CorruptedCorpus(self.images[mask], self.classes[mask],
                               self.corruptions[mask], self.severities[mask], dict(self.meta))

    def by_label(self, code: int) -> "CorruptedCorpus":
        return self.select(self.corruptions == int(code))

    def labels_present(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.corruptions))


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

class CifarFormatError(ValueError):
    def __init__(self, msg: str, record: int):
        super().__init__(f"record {record}: {msg}")
        self.record = record


def parse_cifar10_bin(data: bytes, split: str = "") -> Dataset:
    n, rem = divmod(len(data), CIFAR_RECORD)
    if rem:
        raise CifarFormatError(f"{rem} trailing bytes after last full record", n)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CifarFormatError(f"label byte {labels[bad[0]]} out of range", int(bad[0]))
    pix = raw[:, 1:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset((pix.astype(np.float32) / np.float32(255)), labels, split)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def serialize_cifar10_bin(ds: Dataset) -> bytes:
    if ds.images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"CIFAR records must be {IMAGE_SHAPE}, got {ds.images.shape[1:]}")
    n = len(ds)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = to_uint8(ds.images).transpose(0, 3, 1, 2).reshape(n, -1)
    return out.tobytes()


def load_cifar10_dir(path) -> tuple[Dataset, Dataset]:
    """Read ``data_batch_1..5.bin`` and ``test_batch.bin`` from a directory."""
    path = Path(path)
    train_files = sorted(path.glob("data_batch_*.bin"))
    if not train_files or not (path / "test_batch.bin").exists():
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {path}")
    parts = [parse_cifar10_bin(f.read_bytes()) for f in train_files]
    train = Dataset(np.concatenate([p.images for p in parts]),
                    np.concatenate([p.labels for p in parts]), "train")
    test = parse_cifar10_bin((path / "test_batch.bin").read_bytes(), "test")
    return train, test


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

_SS = 2  # supersampling factor for anti-aliased rendering


def _shape_alpha(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    if cls == 0:
        a = r <= 1.0
    elif cls == 1:
        a = np.maximum(np.abs(u), np.abs(v)) <= 0.8
    elif cls == 2:
        a = (v <= 0.5) & (np.sqrt(3) * u - v <= 1.0) & (-np.sqrt(3) * u - v <= 1.0)
    elif cls == 3:
        a = ((np.abs(u) <= 0.28) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 1.0))
    elif cls == 4:
        a = (r <= 1.0) & (r >= 0.55)
    elif cls == 5:
        a = (np.abs(v) <= 0.25) & (np.abs(u) <= 1.3)
    elif cls == 6:
        a = (np.abs(u) <= 0.25) & (np.abs(v) <= 1.3)
    elif cls == 7:
        inside = np.maximum(np.abs(u), np.abs(v)) <= 1.0
        a = inside & ((np.floor(2 * u) + np.floor(2 * v)) % 2 == 0)
    elif cls == 8:
        inside = np.maximum(np.abs(u), np.abs(v)) <= 1.0
        a = inside & (np.sin((u + v) * 2.5 * np.pi) > 0)
    elif cls == 9:
        # soft blob whose intensity ramps along u
        return np.exp(-1.5 * r * r) * np.clip(0.55 + 0.45 * u, 0, 1)
    else:
        raise ValueError(f"unknown shape class {cls}")
    return a.astype(np.float64)


def _hsv_color(rng: np.random.Generator, value: float) -> np.ndarray:
    h = rng.uniform(0, 1)
    s = rng.uniform(0.3, 0.9)
    k = (np.array([5, 3, 1]) + h * 6) % 6
    return value - value * s * np.clip(np.minimum(k, 4 - k), 0, 1)


def render_shape(cls: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one H x W x 3 image of shape class ``cls``."""
    n = size * _SS
    coords = (np.arange(n) + 0.5) / _SS
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    scale = rng.uniform(0.22, 0.36) * size
    cx, cy = rng.uniform(0.36, 0.64, size=2) * size
    if cls in (3, 5, 6, 8):
        theta = rng.uniform(-0.3, 0.3)
    else:
        theta = rng.uniform(0, 2 * np.pi)
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    alpha = _shape_alpha(cls, u, v)
    alpha = alpha.reshape(size, _SS, size, _SS).mean(axis=(1, 3))

    dark, light = rng.uniform(0.05, 0.35), rng.uniform(0.65, 0.95)
    if rng.random() < 0.5:
        bg, fg = _hsv_color(rng, dark), _hsv_color(rng, light)
    else:
        bg, fg = _hsv_color(rng, light), _hsv_color(rng, dark)
    img = bg * (1 - alpha[..., None]) + fg * alpha[..., None]
    texture = gaussian_filter(rng.standard_normal((size, size)), 1.5)
    img = img + 0.06 * texture[..., None]
    return np.clip(img, 0, 1)


def gen_synthetic(n: int, seed: int, split: str = "synthetic") -> Dataset:
    """``n`` balanced synthetic images (class i % 10, shuffled), quantized to k/255."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % N_CLASSES)
    imgs = np.empty((n, *IMAGE_SHAPE), dtype=np.uint8)
    for i, cls in enumerate(labels):
        imgs[i] = to_uint8(render_shape(int(cls), rng))
    return Dataset(imgs.astype(np.float32) / np.float32(255), labels.astype(np.int64), split)


# ---------------------------------------------------------------------------
# BNAD container
# ---------------------------------------------------------------------------

MAGIC = b"BNAD"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_CODES = {(v.kind, v.itemsize): k for k, v in _DTYPES.items()}


class BNADError(ValueError):
    """Base class for container decoding failures."""


class BadMagicError(BNADError):
    pass


class ChecksumError(BNADError):
    pass


class VersionError(BNADError):
    pass


class FormatError(BNADError):
    """Truncated or structurally invalid container."""


def encode_container(kind: str, chunks: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    kb = kind.encode()
    buf.write(MAGIC + struct.pack("<HH", FORMAT_VERSION, len(kb)) + kb)
    buf.write(struct.pack("<I", len(chunks)))
    for name, arr in chunks.items():
        arr = np.asarray(arr)
        code = _CODES.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise TypeError(f"chunk {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"unexpected end of data at byte {self.pos} (need {n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a BNAD container")
    if len(data) < 4 + 2 + 2 + 4 + 4:
        raise FormatError("container too short")
    body_end = len(data) - 4
    (crc,) = struct.unpack("<I", data[body_end:])
    if zlib.crc32(data[:body_end]) != crc:
        raise ChecksumError("CRC-32 mismatch")
    r = _Reader(data, body_end)
    r.take(4)
    version, klen = r.unpack("<HH")
    if version > FORMAT_VERSION:
        raise VersionError(f"container version {version} is newer than supported {FORMAT_VERSION}")
    try:
        kind = r.take(klen).decode()
        (n_chunks,) = r.unpack("<I")
        chunks: dict[str, np.ndarray] = {}
        for _ in range(n_chunks):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode()
            code, ndim = r.unpack("<BB")
            if code not in _DTYPES:
                raise FormatError(f"chunk {name!r}: unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}I")
            dt = _DTYPES[code]
            count = math.prod(shape)
            payload = r.take(count * dt.itemsize)
            try:
                arr = np.frombuffer(payload, dtype=dt).reshape(shape)
            except ValueError as exc:
                # e.g. a zero-sized shape whose other dims overflow numpy's limits
                raise FormatError(f"chunk {name!r}: unusable shape {shape}: {exc}") from None
            chunks[name] = arr.astype(dt.newbyteorder("="))
    except UnicodeDecodeError as exc:
        raise FormatError(f"bad utf-8 in name: {exc}") from None
    if r.pos != body_end:
        raise FormatError(f"{body_end - r.pos} stray bytes before checksum")
    return kind, chunks


def write_container(path, kind: str, chunks: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_container(kind, chunks))
    os.replace(tmp, path)


def read_container(path, expect_kind: str | None = None) -> dict[str, np.ndarray]:
    kind, chunks = decode_container(Path(path).read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: expected a {expect_kind!r} container, found {kind!r}")
    return chunks


def save_dataset(path, ds: Dataset) -> None:
    write_container(path, "dataset", {
        "images": to_uint8(ds.images),
        "labels": ds.labels.astype(np.int32),
        "split": np.frombuffer(ds.split.encode(), dtype=np.uint8),
    })


def load_dataset(path) -> Dataset:
    c = read_container(path, "dataset")
    return Dataset(c["images"].astype(np.float32) / np.float32(255),
                   c["labels"].astype(np.int64), c["split"].tobytes().decode())


def save_corpus(path, corpus: CorruptedCorpus) -> None:
    # corrupted pixels are arbitrary floats, so they are stored as float32
    write_container(path, "corpus", {
        "images": corpus.images.astype(np.float32),
        "classes": corpus.classes.astype(np.int32),
        "corruptions": corpus.corruptions.astype(np.int32),
        "severities": corpus.severities.astype(np.int32),
    })


def load_corpus(path) -> CorruptedCorpus:
    c = read_container(path, "corpus")
    return CorruptedCorpus(c["images"], c["classes"].astype(np.int64),
                           c["corruptions"].astype(np.int64), c["severities"].astype(np.int64))
