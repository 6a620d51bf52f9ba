"""Paired-dataset construction: filtering, cropping, dedup, calibration, split."""

from .manifest import (
    LABELS,
    STAGES,
    TERMINAL,
    Keypoint,
    KeypointSet,
    Manifest,
    Record,
    RegionBox,
    StageOrderError,
)
from .plugins import DEFAULT_BINDINGS, PluginError, SubprocessPlugin, resolve
from .prepare import PrepareConfig, PrepareReport, load_pairs, prepare
from .stages import (
    DEFAULT_SPLIT_RATIO,
    Calibration,
    DuplicateGrouper,
    LabelSet,
    UndetectedError,
    active_learning_round,
    calibrate,
    crop_regions,
    dedup,
    filter_pairs,
    filter_scores,
    garment_center,
    similarity_matrix,
    split_dataset,
    split_groups,
)

__all__ = [
    "DEFAULT_BINDINGS",
    "DEFAULT_SPLIT_RATIO",
    "LABELS",
    "STAGES",
    "TERMINAL",
    "Calibration",
    "DuplicateGrouper",
    "Keypoint",
    "KeypointSet",
    "LabelSet",
    "Manifest",
    "PluginError",
    "PrepareConfig",
    "PrepareReport",
    "Record",
    "RegionBox",
    "StageOrderError",
    "SubprocessPlugin",
    "UndetectedError",
    "active_learning_round",
    "calibrate",
    "crop_regions",
    "dedup",
    "filter_pairs",
    "filter_scores",
    "garment_center",
    "load_pairs",
    "prepare",
    "resolve",
    "similarity_matrix",
    "split_dataset",
    "split_groups",
]
