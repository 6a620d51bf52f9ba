"""Anime character to clothing image translation with a progressively grown
conditional GAN, plus dataset preparation and evaluation tooling."""

from .discriminators import (
    MultiScaleDomainDiscriminator,
    PatchScoreMaps,
    RealFakeDiscriminator,
    domain_discriminate,
    realfake_discriminate,
)
from .estimator import CostumeTranslator
from .evaluation import fid, frechet_distance, gaussian_stats, lpips
from .generator import UNetGenerator, generate, grow, init_weights
from .losses import LADDER, LossWeights, TermFlags, ladder_flags, total_losses
from .progressive import ProgressiveState
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "LADDER",
    "CostumeTranslator",
    "LossWeights",
    "MultiScaleDomainDiscriminator",
    "PatchScoreMaps",
    "ProgressiveState",
    "RealFakeDiscriminator",
    "TermFlags",
    "TrainConfig",
    "Trainer",
    "UNetGenerator",
    "domain_discriminate",
    "fid",
    "frechet_distance",
    "gaussian_stats",
    "generate",
    "grow",
    "init_weights",
    "ladder_flags",
    "lpips",
    "realfake_discriminate",
    "total_losses",
]
