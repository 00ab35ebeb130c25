"""Desk-scale experiment stages shared by the CLI, the demos and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from .basemodel import BaseCNN, BaseTrainConfig, BNTable, build_bn_table, train_base
from .corruptions import CORRUPTIONS, build_corrupted_dataset
from .dataio import CorruptedCorpus, Dataset, gen_synthetic
from .spectrum import NaturalSpectrum, extract_features, mean_amplitude


def derive_seed(seed: int, stage: str) -> int:
    """Independent 32-bit seed for a named stage."""
    tag = [ord(ch) for ch in stage]
    return int(np.random.SeedSequence([seed, *tag]).generate_state(1)[0])


@dataclass
class DeskConfig:
    n_images: int = 6000
    n_test: int = 1000
    seed: int = 7
    train_per_cell: int = 100
    test_per_cell: int = 100
    base: BaseTrainConfig = field(default_factory=lambda: BaseTrainConfig(epochs=8))
    detector: det.TrainSchedule = field(default_factory=det.TrainSchedule)


def generate(n: int, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Synthetic images split into (train, test); the last ``n_test`` go to test."""
    if not 0 < n_test < n:
        raise ValueError("need 0 < n_test < n")
    ds = gen_synthetic(n, seed)
    idx = np.arange(n)
    return ds.subset(idx[: n - n_test], "train"), ds.subset(idx[n - n_test:], "test")


def corrupt_splits(train: Dataset, test: Dataset, cfg: DeskConfig) -> tuple[CorruptedCorpus, CorruptedCorpus]:
    """Detector/BN-table corpus from train images, evaluation corpus from test images."""
    tr = build_corrupted_dataset(train, CORRUPTIONS, count=cfg.train_per_cell,
                                 seed=derive_seed(cfg.seed, "corrupt-train"))
    te = build_corrupted_dataset(test, CORRUPTIONS, count=cfg.test_per_cell,
                                 seed=derive_seed(cfg.seed, "corrupt-test"))
    return tr, te


def natural_spectrum(corpus: CorruptedCorpus) -> NaturalSpectrum:
    """Mean amplitude of the corpus' natural records (the small adaptation pool)."""
    natural = corpus.by_label(0)
    if len(natural) == 0:
        raise ValueError("corpus has no natural records")
    return mean_amplitude(natural.images)


def fit_base(train: Dataset, cfg: DeskConfig, log=None) -> BaseCNN:
    base_cfg = BaseTrainConfig(**{**cfg.base.__dict__, "seed": derive_seed(cfg.seed, "base")})
    return train_base(train, base_cfg, log)


def pixel_features(images: np.ndarray) -> np.ndarray:
    """Raw first-channel pixels, the control input for the detector."""
    return np.ascontiguousarray(images[..., 0].reshape(len(images), -1), dtype=np.float32)


def fit_detector(features: np.ndarray, labels: np.ndarray, cfg: DeskConfig, log=None):
    schedule = det.TrainSchedule(**{**cfg.detector.__dict__, "seed": derive_seed(cfg.seed, "detector")})
    model = det.init_detector(features.shape[1], int(labels.max()) + 1, derive_seed(cfg.seed, "detector-init"))
    return det.train_detector(model, features, labels, schedule, log)


def spectrum_detector(corpus: CorruptedCorpus, eps: NaturalSpectrum, cfg: DeskConfig, log=None):
    return fit_detector(extract_features(corpus.images, eps), corpus.corruptions, cfg, log)


def collect_table(base: BaseCNN, corpus: CorruptedCorpus, N: float = 1.0, n: float = 1.0) -> BNTable:
    corpora = {c: corpus.by_label(c).images for c in corpus.labels_present() if c != 0}
    return build_bn_table(base, corpora, N, n)
