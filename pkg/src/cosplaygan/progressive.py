"""Coarse-to-fine bookkeeping shared by the generator and both discriminators."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ._validation import is_power_of_two


@dataclass(frozen=True)
class ProgressiveState:
    """Current resolution stage and fade-in coefficient.

    ``stage`` 0 is the lowest resolution; ``fade_alpha`` is 1 once a stage is
    fully grown and blends new-stage output with the upsampled previous-stage
    output while it ramps from 0.
    """

    stage: int = 0
    fade_alpha: float = 1.0
    min_resolution: int = 32

    def __post_init__(self):
        if self.stage < 0:
            raise ValueError(f"stage must be >= 0, got {self.stage}")
        if not 0.0 <= self.fade_alpha <= 1.0:
            raise ValueError(f"fade_alpha must lie in [0, 1], got {self.fade_alpha}")
        if self.stage == 0 and self.fade_alpha != 1.0:
            raise ValueError("stage 0 has nothing to fade from; fade_alpha must be 1")
        if not is_power_of_two(self.min_resolution):
            raise ValueError(f"min_resolution must be a power of two, got {self.min_resolution}")

    @property
    def resolution(self):
        return self.min_resolution * 2 ** self.stage

    @property
    def fading(self):
        return self.stage > 0 and self.fade_alpha < 1.0


def stage_count(min_resolution, max_resolution):
    if not (is_power_of_two(min_resolution) and is_power_of_two(max_resolution)):
        raise ValueError("resolutions must be powers of two")
    if max_resolution < min_resolution:
        raise ValueError("max_resolution must be >= min_resolution")
    return max_resolution.bit_length() - min_resolution.bit_length() + 1


def pool2(x):
    """2x2 mean pooling."""
    return F.avg_pool2d(x, 2)


def upsample2(x):
    """Nearest-neighbour 2x upsampling (the exact right-inverse of ``pool2`` on constant blocks)."""
    return F.interpolate(x, scale_factor=2, mode="nearest")


def resize_batch(x, resolution):
    """Bring a batch to ``resolution`` by repeated mean pooling (down) or nearest upsampling (up)."""
    side = x.shape[-1]
    while side > resolution:
        x = pool2(x)
        side //= 2
    while side < resolution:
        x = upsample2(x)
        side *= 2
    return x


def blend(alpha, new, old):
    if alpha >= 1.0:
        return new
    if alpha <= 0.0:
        return old
    return alpha * new + (1.0 - alpha) * old


def init_normal_(module, seed, std=0.02):
    """Zero-mean normal weights (std 0.02) and zero biases, reproducible per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
