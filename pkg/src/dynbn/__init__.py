"""Corruption-aware batch-norm statistics swapping on a hand-written numpy CNN."""
from .basemodel import BaseCNN, BNStats, BNTable, apply_bn, estimate_bn, merge_bn
from .corruptions import CORRUPTIONS, CorruptionLabel, build_corrupted_dataset, corrupt
from .dataio import CorruptedCorpus, Dataset
from .detector import DetectorModel
from .pipeline import AdaptivePipeline
from .spectrum import NaturalSpectrum, extract_feature, extract_features, mean_amplitude

__all__ = [
    "AdaptivePipeline", "BaseCNN", "BNStats", "BNTable", "CORRUPTIONS", "CorruptedCorpus",
    "CorruptionLabel", "Dataset", "DetectorModel", "NaturalSpectrum", "apply_bn", "build_corrupted_dataset", "corrupt",
    "estimate_bn", "extract_feature", "extract_features", "mean_amplitude", "merge_bn",
]
