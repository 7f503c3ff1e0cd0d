"""Pretraining dataset construction: tiles, sequences, QA and caps."""
from .patches import QAVerdict, cap_and_dedup, fill_chip, fill_missing_nearest, filter_patch, subsample_homogeneous
from .pipeline import Check, SamplerConfig, SamplingResult, lulc_distribution, run_sampler, verify_dataset
from .records import PatchRecord, SceneQA, TileRecord, gaps_valid, lulc_entropy, month_index
from .sequences import build_sequences
from .tiles import TileSelection, TileSelectionConfig, select_tiles

__all__ = [
    "Check",
    "PatchRecord",
    "QAVerdict",
    "SamplerConfig",
    "SamplingResult",
    "SceneQA",
    "TileRecord",
    "TileSelection",
    "TileSelectionConfig",
    "build_sequences",
    "cap_and_dedup",
    "fill_chip",
    "fill_missing_nearest",
    "filter_patch",
    "gaps_valid",
    "lulc_distribution",
    "lulc_entropy",
    "month_index",
    "run_sampler",
    "select_tiles",
    "subsample_homogeneous",
    "verify_dataset",
]
