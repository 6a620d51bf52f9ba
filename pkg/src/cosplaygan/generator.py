"""Progressively grown U-Net generator mapping an anime image to a clothing image."""

import math

import torch
from torch import nn

from ._validation import check_image_batch, sub_rng
from .progressive import (
    ProgressiveState,
    blend,
    init_normal_,
    pool2,
    stage_count,
    upsample2,
)


class PixelNorm(nn.Module):
    def __init__(self, eps=1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + self.eps)


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2), PixelNorm())


def _up(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.ReLU(), PixelNorm())


def _level_key(resolution):
    return f"r{resolution}"


class UNetGenerator(nn.Module):
    """U-Net with concatenative skips at every level above the 1x1 bottleneck.

    The network is organised by resolution level. Level ``r`` owns a stride-2
    convolution taking encoder features at ``2r`` down to ``r`` and a transposed
    convolution taking decoder features at ``r`` up to ``2r``. Growing adds one
    level on top plus a fresh 1x1 ``from_rgb``/``to_rgb`` pair; everything that
    already existed is left untouched.

    Channel width at level ``r`` is ``min(ngf * max_resolution / r, max_channels)``.

    Args:
        ngf: width at the full output resolution.
        max_channels: cap on the per-level width.
        min_resolution: side length of stage 0.
        max_resolution: side length of the final stage.
        seed: root seed; stage ``s`` layers are drawn from a stream keyed on ``(seed, s)``.
    """

    def __init__(self, ngf=64, max_channels=512, min_resolution=32, max_resolution=256, seed=0):
        super().__init__()
        self.ngf = ngf
        self.max_channels = max_channels
        self.min_resolution = min_resolution
        self.max_resolution = max_resolution
        self.seed = seed
        self.max_stages = stage_count(min_resolution, max_resolution)

        self.down = nn.ModuleDict()
        self.up = nn.ModuleDict()
        self.from_rgb = nn.ModuleList()
        self.to_rgb = nn.ModuleList()

        # levels strictly below the stage-0 resolution, down to the 1x1 bottleneck
        r = min_resolution // 2
        while r >= 1:
            self.down[_level_key(r)] = _down(self.channels(2 * r), self.channels(r))
            self.up[_level_key(r)] = _up(self._decoder_channels(r), self.channels(2 * r))
            r //= 2
        self._add_rgb(min_resolution)
        init_normal_(self, self._stage_seed(0))

    def channels(self, resolution):
        return min(self.ngf * self.max_resolution // resolution, self.max_channels)

    def _decoder_channels(self, resolution):
        # bottleneck has no skip; every other level concatenates its encoder features
        return self.channels(1) if resolution == 1 else 2 * self.channels(resolution)

    def _add_rgb(self, resolution):
        self.from_rgb.append(nn.Sequential(nn.Conv2d(3, self.channels(resolution), 1),
                                           nn.LeakyReLU(0.2)))
        self.to_rgb.append(nn.Conv2d(2 * self.channels(resolution), 3, 1))

    def _stage_seed(self, stage):
        return int(sub_rng(self.seed, "generator", stage).integers(2 ** 62))

    @property
    def n_stages(self):
        """Number of stages built so far."""
        return len(self.from_rgb)

    @property
    def top_resolution(self):
        return self.min_resolution * 2 ** (self.n_stages - 1)

    @property
    def skip_connections(self):
        """(encoder level, decoder level) pairs, one per level above the bottleneck."""
        levels = [self.top_resolution // 2 ** k for k in range(int(math.log2(self.top_resolution)))]
        return [(r, r) for r in levels]

    def grow(self):
        """Append the next resolution level; returns the added modules."""
        if self.n_stages >= self.max_stages:
            raise ValueError(f"already at the maximum resolution {self.max_resolution}")
        stage = self.n_stages
        prev = self.top_resolution
        new = nn.ModuleDict({
            "down": _down(self.channels(2 * prev), self.channels(prev)),
            "up": _up(self._decoder_channels(prev), self.channels(2 * prev)),
        })
        rgb = nn.ModuleList()
        rgb.append(nn.Sequential(nn.Conv2d(3, self.channels(2 * prev), 1), nn.LeakyReLU(0.2)))
        rgb.append(nn.Conv2d(2 * self.channels(2 * prev), 3, 1))
        fresh = nn.ModuleList([new, rgb])
        init_normal_(fresh, self._stage_seed(stage))
        ref = next(self.parameters())
        fresh.to(device=ref.device, dtype=ref.dtype)
        self.down[_level_key(prev)] = new["down"]
        self.up[_level_key(prev)] = new["up"]
        self.from_rgb.append(rgb[0])
        self.to_rgb.append(rgb[1])
        return fresh

    def _unet(self, encoded, top, cut_skips=()):
        """Run the U-Net from encoder features at ``top`` down to 1x1 and back.

        Returns the decoder features (with skip concatenated) at every level.
        """
        feats = {top: encoded[top]}
        r = top
        while r > 1:
            r //= 2
            feats[r] = encoded[r] if r in encoded else self.down[_level_key(r)](feats[2 * r])
        decoded = {1: feats[1]}
        r = 1
        while r < top:
            up = self.up[_level_key(r)](decoded[r])
            skip = feats[2 * r]
            if 2 * r in cut_skips:
                skip = torch.zeros_like(skip)
            decoded[2 * r] = torch.cat([up, skip], dim=1)
            r *= 2
        return decoded

    def forward(self, x, state, cut_skips=()):
        """Translate a batch ``(N, 3, R, R)`` with ``R = state.resolution``.

        ``cut_skips`` zeroes the skip tensors at the listed resolutions; it
        exists only to probe that the wiring is live.
        """
        s = state.stage
        if s >= self.n_stages:
            raise ValueError(f"stage {s} not grown yet (have {self.n_stages})")
        res = state.resolution
        if x.shape[-1] != res or x.shape[-2] != res:
            raise ValueError(f"input side {x.shape[-1]} does not match stage resolution {res}")

        top = self.from_rgb[s](x)
        encoded = {res: top}
        if state.fading:
            half = res // 2
            new_half = self.down[_level_key(half)](top)
            old_half = self.from_rgb[s - 1](pool2(x))
            encoded[half] = blend(state.fade_alpha, new_half, old_half)

        decoded = self._unet(encoded, res, cut_skips)
        out = torch.tanh(self.to_rgb[s](decoded[res]))
        if state.fading:
            old = torch.tanh(self.to_rgb[s - 1](decoded[res // 2]))
            out = blend(state.fade_alpha, out, upsample2(old))
        return out


def init_weights(seed, **arch):
    """Fresh stage-0 generator with N(0, 0.02) weights drawn from ``seed``."""
    return UNetGenerator(seed=seed, **arch)


def _check_finite_params(module):
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"non-finite weights in {name}")


def generate(x, params, state):
    """Validated inference: ``x`` -> ``G(x)`` at ``state.resolution``, no gradients."""
    _check_finite_params(params)
    ref = next(params.parameters())
    xt = check_image_batch(x, resolution=state.resolution, dtype=ref.dtype)
    with torch.no_grad():
        return params(xt.to(ref.device), state)


def grow(params, state):
    """Grow in place and return ``(params, state)`` for the next stage with ``fade_alpha = 0``."""
    if state.fade_alpha != 1.0:
        raise ValueError("can only grow from a fully faded-in stage")
    if state.stage != params.n_stages - 1:
        raise ValueError(f"state stage {state.stage} is not the top built stage {params.n_stages - 1}")
    params.grow()
    return params, ProgressiveState(state.stage + 1, 0.0, state.min_resolution)


__all__ = ["PixelNorm", "UNetGenerator", "generate", "grow", "init_weights"]
