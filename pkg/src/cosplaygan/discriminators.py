"""Multi-scale domain discriminator, multi-head real/fake patch discriminator and
spectral normalization."""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import check_image_batch, sub_rng
from .progressive import blend, init_normal_, pool2, stage_count, upsample2

SIGMA_EPS = 1e-12


# --------------------------------------------------------------------------- #
# spectral normalization
# --------------------------------------------------------------------------- #

def _l2normalize(v, eps=1e-12):
    return v / (v.norm() + eps)


def power_iteration(w2d, u, v, n_iterations=1):
    """Refine ``(u, v)`` in place for the top singular pair of ``w2d``; returns ``(u, v)``."""
    with torch.no_grad():
        for _ in range(n_iterations):
            v.copy_(_l2normalize(w2d.t() @ u))
            u.copy_(_l2normalize(w2d @ v))
    return u, v


def estimate_sigma(w2d, u, v):
    """Rayleigh-quotient estimate ``u^T W v``; differentiable w.r.t. ``w2d`` only."""
    return torch.dot(u, w2d @ v)


@dataclass
class SpectralNormState:
    """Power-iteration vectors for one weight; ``u`` spans outputs, ``v`` the flattened inputs."""

    u: np.ndarray
    v: np.ndarray
    n_iterations: int = 1

    @classmethod
    def for_weight(cls, weight, seed=0, n_iterations=1):
        w = np.asarray(weight)
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(w.shape[0])
        v = rng.standard_normal(int(np.prod(w.shape[1:])))
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v), n_iterations)


def apply_spectral_norm(weight, state, update=True):
    """Divide ``weight`` by the power-iteration estimate of its top singular value.

    ``weight`` is reshaped to ``(out, -1)``. With ``update`` the state's ``u``/``v``
    are advanced ``state.n_iterations`` times first. The estimate is floored at
    1e-12 so an all-zero weight comes back unchanged instead of as NaN.

    Returns:
        ``(normalized_weight, sigma_hat)`` with the input's shape.
    """
    w = np.asarray(weight, dtype=np.float64)
    w2d = torch.from_numpy(w.reshape(w.shape[0], -1))
    u = torch.from_numpy(np.array(state.u, dtype=np.float64))
    v = torch.from_numpy(np.array(state.v, dtype=np.float64))
    if update:
        power_iteration(w2d, u, v, state.n_iterations)
        state.u, state.v = u.numpy(), v.numpy()
    sigma = max(float(estimate_sigma(w2d, u, v)), SIGMA_EPS)
    return w / sigma, sigma


class SNConv2d(nn.Conv2d):
    """Conv2d whose weight is divided by its estimated spectral norm at every forward.

    The ``u``/``v`` buffers only move when :meth:`power_iterate` is called, so
    forwards are pure and a training step can refresh the estimate exactly once.
    """

    def __init__(self, *args, spectral_norm=True, n_power_iterations=1, **kwargs):
        super().__init__(*args, **kwargs)
        self.use_sn = spectral_norm
        self.n_power_iterations = n_power_iterations
        rows = self.weight.shape[0]
        cols = self.weight[0].numel()
        self.register_buffer("weight_u", _l2normalize(torch.ones(rows)))
        self.register_buffer("weight_v", _l2normalize(torch.ones(cols)))

    def reset_sn(self, seed, warmup=20):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            self.weight_u.copy_(_l2normalize(torch.randn(self.weight_u.shape, generator=gen)))
            self.weight_v.copy_(_l2normalize(torch.randn(self.weight_v.shape, generator=gen)))
        self.power_iterate(warmup)

    def power_iterate(self, n=None):
        if not self.use_sn:
            return
        w2d = self.weight.detach().reshape(self.weight.shape[0], -1)
        power_iteration(w2d, self.weight_u, self.weight_v, n or self.n_power_iterations)

    def sigma(self):
        w2d = self.weight.reshape(self.weight.shape[0], -1)
        return estimate_sigma(w2d, self.weight_u, self.weight_v)

    def normalized_weight(self):
        if not self.use_sn:
            return self.weight
        return self.weight / self.sigma().clamp_min(SIGMA_EPS)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


def _sn_modules(module):
    return [m for m in module.modules() if isinstance(m, SNConv2d)]


def _init_discriminator(module, seed):
    init_normal_(module, seed)
    for i, m in enumerate(_sn_modules(module)):
        m.reset_sn(int(sub_rng(seed, "sn", i).integers(2 ** 62)))


# --------------------------------------------------------------------------- #
# shared pieces
# --------------------------------------------------------------------------- #

@dataclass
class PatchScoreMaps:
    """Score maps ``(N, 1, h, w)`` per head and the tapped trunk activations."""

    scores: list
    features: list = field(default_factory=list)

    @property
    def shapes(self):
        return [tuple(s.shape[-2:]) for s in self.scores]


def downsample_pyramid(img, levels):
    """Level 0 is ``img``; level ``k`` is the 2x2 mean pool of level ``k - 1``.

    Works on ``(N, C, H, W)`` tensors or ``(H, W, C)`` / ``(N, H, W, C)`` numpy arrays
    and returns the same kind.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    is_numpy = not isinstance(img, torch.Tensor)
    if is_numpy:
        arr = np.asarray(img, dtype=np.float64)
        single = arr.ndim == 3
        t = torch.from_numpy((arr[None] if single else arr).transpose(0, 3, 1, 2).copy())
    else:
        t = img
    h, w = t.shape[-2:]
    step = 2 ** (levels - 1)
    if h % step or w % step:
        raise ValueError(f"side {h}x{w} is not divisible by 2^{levels - 1}")
    out = [t]
    for _ in range(levels - 1):
        out.append(pool2(out[-1]))
    if is_numpy:
        out = [o.numpy().transpose(0, 2, 3, 1) for o in out]
        if single:
            out = [o[0] for o in out]
    return out


def _fit_kernel(h, kernel, padding):
    """Zero-pad tiny maps so a valid convolution still yields at least one cell."""
    need = kernel - 2 * padding
    side = h.shape[-1]
    if side >= need:
        return h
    extra = need - side
    return F.pad(h, (extra // 2, extra - extra // 2, extra // 2, extra - extra // 2))


class _Block(nn.Module):
    """Chain of (SN conv, LeakyReLU) layers; the output is one tap."""

    def __init__(self, specs, spectral_norm=True):
        super().__init__()
        self.convs = nn.ModuleList(
            SNConv2d(cin, cout, k, s, p, spectral_norm=spectral_norm) for cin, cout, k, s, p in specs)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, h):
        for conv in self.convs:
            h = self.act(conv(_fit_kernel(h, conv.kernel_size[0], conv.padding[0])))
        return h


class _ProgressiveInput(nn.Module):
    """Stage-indexed 1x1 input layers with a fade-in from the pooled image."""

    def __init__(self, in_channels, out_channels, spectral_norm=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spectral_norm = spectral_norm
        self.layers = nn.ModuleList([self._make()])

    def _make(self):
        return SNConv2d(self.in_channels, self.out_channels, 1, spectral_norm=self.spectral_norm)

    def grow(self):
        layer = self._make()
        self.layers.append(layer)
        return layer

    def forward(self, img, state):
        h = F.leaky_relu(self.layers[state.stage](img), 0.2)
        if state.fading:
            old = F.leaky_relu(self.layers[state.stage - 1](pool2(img)), 0.2)
            h = blend(state.fade_alpha, h, upsample2(old))
        return h


class _ProgressiveDiscriminator(nn.Module):
    def __init__(self, min_resolution, max_resolution, seed, tag):
        super().__init__()
        self.min_resolution = min_resolution
        self.max_resolution = max_resolution
        self.max_stages = stage_count(min_resolution, max_resolution)
        self.seed = seed
        self.tag = tag

    def _stage_seed(self, stage):
        return int(sub_rng(self.seed, self.tag, stage).integers(2 ** 62))

    def _finish_grow(self, fresh):
        _init_discriminator(fresh, self._stage_seed(self.n_stages - 1))
        ref = next(self.parameters())
        fresh.to(device=ref.device, dtype=ref.dtype)

    def power_iterate(self):
        """Advance every spectral-norm estimate by its configured iteration count."""
        for m in _sn_modules(self):
            m.power_iterate()

    def set_spectral_norm(self, enabled):
        for m in _sn_modules(self):
            m.use_sn = enabled

    def _check_stage(self, state, side):
        if state.stage >= self.n_stages:
            raise ValueError(f"stage {state.stage} not grown yet (have {self.n_stages})")
        if side != state.resolution:
            raise ValueError(f"input side {side} does not match stage resolution {state.resolution}")


# --------------------------------------------------------------------------- #
# D_d: multi-scale domain discriminator
# --------------------------------------------------------------------------- #

def _widths(base, n, cap):
    return [min(base * 2 ** i, cap) for i in range(n)]


class PairDiscriminator(nn.Module):
    """One scale of the domain discriminator: a fully convolutional patch judge on
    the channel-concatenated ``(x, y)`` pair with five tapped blocks."""

    N_TAPS = 5

    def __init__(self, ndf=64, max_channels=512, spectral_norm=True):
        super().__init__()
        w = _widths(ndf, 4, max_channels)
        w.append(w[-1])
        self.inputs = _ProgressiveInput(6, ndf, spectral_norm)
        chans = [ndf] + w
        strides = [2, 2, 2, 1, 1]
        self.blocks = nn.ModuleList(
            _Block([(chans[i], chans[i + 1], 3, strides[i], 1)], spectral_norm) for i in range(5))
        self.head = SNConv2d(w[-1], 1, 3, 1, 1, spectral_norm=spectral_norm)

    def forward(self, pair, state):
        h = self.inputs(pair, state)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return PatchScoreMaps([self.head(h)], feats)


class MultiScaleDomainDiscriminator(_ProgressiveDiscriminator):
    """Three pair discriminators with identical structure and separate weights,
    fed the full, half and quarter resolution ``(x, y)`` pair."""

    N_TAPS = PairDiscriminator.N_TAPS

    def __init__(self, ndf=64, max_channels=512, min_resolution=32, max_resolution=256,
                 n_scales=3, spectral_norm=True, seed=0):
        super().__init__(min_resolution, max_resolution, seed, "domain")
        self.n_scales = n_scales
        self.scales = nn.ModuleList(
            PairDiscriminator(ndf, max_channels, spectral_norm) for _ in range(n_scales))
        _init_discriminator(self, self._stage_seed(0))

    @property
    def n_stages(self):
        return len(self.scales[0].inputs.layers)

    def grow(self):
        if self.n_stages >= self.max_stages:
            raise ValueError("already at the maximum resolution")
        fresh = nn.ModuleList(d.inputs.grow() for d in self.scales)
        self._finish_grow(fresh)
        return fresh

    def forward(self, x, y, state, n_scales=None):
        if x.shape != y.shape:
            raise ValueError(f"x and y shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        self._check_stage(state, x.shape[-1])
        n = self.n_scales if n_scales is None else n_scales
        pyramid = downsample_pyramid(torch.cat([x, y], dim=1), n)
        return [self.scales[k](pyramid[k], state) for k in range(n)]


# --------------------------------------------------------------------------- #
# D_r: real/fake multi-scale patch discriminator
# --------------------------------------------------------------------------- #

class RealFakeDiscriminator(_ProgressiveDiscriminator):
    """Single trunk with three heads emitting 61x61, 13x13 and 1x1 maps at 256 px.

    Above 64 px the input passes through stride-2 stem blocks (one per growth
    step) down to 64 px. The tail is

        t1: k4 s1 p0        64 -> 61    head 1
        t2: k4 s2 p1        61 -> 30
        t3: k4 s2 p1, k3 s1 30 -> 15 -> 13  head 2
        t4: k3 s2 p0        13 -> 6
        t5: k4 s2 p1, mean  6 -> 3 -> 1     head 3

    and t1..t5 are the five feature taps. Heads are 1x1 convolutions. Below
    64 px the same tail runs on the smaller input, so maps shrink with the
    stage and the last head is still 1x1.
    """

    N_TAPS = 5
    TAIL_RESOLUTION = 64

    def __init__(self, ndf=64, max_channels=512, min_resolution=32, max_resolution=256,
                 spectral_norm=True, seed=0):
        super().__init__(min_resolution, max_resolution, seed, "realfake")
        self.ndf = ndf
        self.max_channels = max_channels
        self.spectral_norm = spectral_norm
        c = self.channels(self.TAIL_RESOLUTION)
        w = _widths(2 * c, 3, max_channels)
        w += [w[-1], w[-1]]
        sn = spectral_norm
        self.tail = nn.ModuleList([
            _Block([(c, w[0], 4, 1, 0)], sn),
            _Block([(w[0], w[1], 4, 2, 1)], sn),
            _Block([(w[1], w[2], 4, 2, 1), (w[2], w[2], 3, 1, 0)], sn),
            _Block([(w[2], w[3], 3, 2, 0)], sn),
            _Block([(w[3], w[4], 4, 2, 1)], sn),
        ])
        self.heads = nn.ModuleList(SNConv2d(w[i], 1, 1, spectral_norm=sn) for i in (0, 2, 4))
        self.from_rgb = nn.ModuleList([self._make_from_rgb(min_resolution)])
        self.stems = nn.ModuleDict()
        _init_discriminator(self, self._stage_seed(0))

    def channels(self, resolution):
        r = max(resolution, self.TAIL_RESOLUTION)
        return min(self.ndf * self.max_resolution // r, self.max_channels) if r <= self.max_resolution \
            else self.ndf

    def _make_from_rgb(self, resolution):
        return SNConv2d(3, self.channels(resolution), 1, spectral_norm=self.spectral_norm)

    @property
    def n_stages(self):
        return len(self.from_rgb)

    def grow(self):
        if self.n_stages >= self.max_stages:
            raise ValueError("already at the maximum resolution")
        res = self.min_resolution * 2 ** self.n_stages
        fresh = nn.ModuleList([self._make_from_rgb(res)])
        self.from_rgb.append(fresh[0])
        if res > self.TAIL_RESOLUTION:
            stem = _Block([(self.channels(res), self.channels(res // 2), 4, 2, 1)], self.spectral_norm)
            self.stems[f"r{res}"] = stem
            fresh.append(stem)
        self._finish_grow(fresh)
        return fresh

    def forward(self, img, state):
        self._check_stage(state, img.shape[-1])
        res = state.resolution
        s = state.stage
        h = F.leaky_relu(self.from_rgb[s](img), 0.2)
        if res > self.TAIL_RESOLUTION:
            h = self.stems[f"r{res}"](h)
        if state.fading:
            old = F.leaky_relu(self.from_rgb[s - 1](pool2(img)), 0.2)
            if res <= self.TAIL_RESOLUTION:
                old = upsample2(old)
            h = blend(state.fade_alpha, h, old)
        r = res // 2 if res > self.TAIL_RESOLUTION else res
        while r > self.TAIL_RESOLUTION:
            h = self.stems[f"r{r}"](h)
            r //= 2

        feats = []
        for i, block in enumerate(self.tail):
            h = block(h)
            if i == len(self.tail) - 1:
                h = h.mean(dim=(2, 3), keepdim=True)
            feats.append(h)
        scores = [head(feats[i]) for head, i in zip(self.heads, (0, 2, 4))]
        return PatchScoreMaps(scores, feats)


# --------------------------------------------------------------------------- #
# validated functional entry points
# --------------------------------------------------------------------------- #

def _as_input(img, state, module):
    ref = next(module.parameters())
    return check_image_batch(img, resolution=state.resolution, dtype=ref.dtype).to(ref.device)


def domain_discriminate(x, y, params, state):
    """Score an ``(x, y)`` pair at full, 1/2 and 1/4 resolution; one result per scale."""
    xt = _as_input(x, state, params)
    yt = _as_input(y, state, params)
    return params(xt, yt, state)


def realfake_discriminate(img, params, state):
    return params(_as_input(img, state, params), state)
