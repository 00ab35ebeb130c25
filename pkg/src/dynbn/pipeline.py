"""Adaptive inference: featurize, detect the corruption, swap BN stats, classify."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import detector as det
from .basemodel import BaseCNN, BNTable, apply_bn
from .numerics import ShapeError, softmax
from .spectrum import NaturalSpectrum, extract_features

MODES = ("per_image", "batch_majority")


def majority_label(codes: np.ndarray) -> int:
    """Most frequent code; ties go to the smallest code."""
    return int(np.bincount(np.asarray(codes, dtype=np.int64)).argmax())


class AdaptivePipeline:
    """Detector -> BN lookup table -> base model with swapped statistics.

    ``detect_fn`` replaces the spectrum + detector stage when given; it maps a
    batch of images to corruption codes (handy for stubs and oracle studies).
    Model views are created once per label and cached.
    """

    def __init__(self, eps: NaturalSpectrum, detector: det.DetectorModel | None, base: BaseCNN,
                 table: BNTable, mode: str = "per_image",
                 detect_fn: Callable[[np.ndarray], np.ndarray] | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        table.validate(base)
        if detector is not None:
            if detector.in_dim != eps.feature_length:
                raise ShapeError(f"detector input {detector.in_dim} != feature length {eps.feature_length}")
            missing = [c for c in range(detector.n_classes) if c not in table]
            if missing:
                raise KeyError(f"BN table lacks entries for detector classes {missing}")
        elif detect_fn is None:
            raise ValueError("need a detector or a detect_fn")
        self.eps, self.detector, self.base, self.table = eps, detector, base, table
        self.mode = mode
        self.detect_fn = detect_fn
        self._views: dict[int, BaseCNN] = {}

    def view(self, code: int) -> BaseCNN:
        code = int(code)
        if code not in self._views:
            if code not in self.table:
                raise KeyError(f"no BN statistics for corruption label {code}")
            self._views[code] = apply_bn(self.base, self.table[code])
        return self._views[code]

    def detect(self, images: np.ndarray) -> np.ndarray:
        if self.detect_fn is not None:
            return np.asarray(self.detect_fn(images), dtype=np.int64)
        if images.shape[1:3] != self.eps.shape and images.shape[1:3] != tuple(2 * d for d in self.eps.shape):
            raise ShapeError(f"image grid {images.shape[1:3]} does not match spectrum grid {self.eps.shape}")
        labels, _ = det.predict(self.detector, extract_features(images, self.eps))
        return np.asarray(labels, dtype=np.int64)

    def route(self, images: np.ndarray, codes: np.ndarray) -> np.ndarray:
        """Logits of each image under the BN statistics of its code."""
        codes = np.asarray(codes)
        logits = np.empty((len(images), 10), dtype=np.float32)
        for c in np.unique(codes):
            idx = np.flatnonzero(codes == c)
            logits[idx] = self.view(c).logits(images[idx])
        return logits

    def infer_batch(self, images: np.ndarray, mode: str | None = None):
        """Returns (class predictions, detected codes, class probabilities)."""
        mode = mode or self.mode
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(images) == 0:
            raise ValueError("empty batch")
        codes = self.detect(images)
        if mode == "batch_majority":
            codes = np.full_like(codes, majority_label(codes))
        logits = self.route(images, codes)
        return logits.argmax(axis=1), codes, softmax(logits)

    def infer(self, img: np.ndarray):
        """Single image: (class prediction, detected code, class probabilities)."""
        pred, codes, probs = self.infer_batch(img[None], "per_image")
        return int(pred[0]), int(codes[0]), probs[0]

    def predict(self, images: np.ndarray, batch: int = 512) -> np.ndarray:
        out = [self.infer_batch(images[s:s + batch])[0] for s in range(0, len(images), batch)]
        return np.concatenate(out)
