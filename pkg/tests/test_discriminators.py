import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from utils import rand_images

from cosplaygan.discriminators import (
    MultiScaleDomainDiscriminator,
    RealFakeDiscriminator,
    SNConv2d,
    SpectralNormState,
    apply_spectral_norm,
    domain_discriminate,
    downsample_pyramid,
    power_iteration,
    realfake_discriminate,
)
from cosplaygan.progressive import ProgressiveState


def _grown(cls, stages, **kw):
    d = cls(**kw)
    for _ in range(stages - 1):
        d.grow()
    return d


# --------------------------------------------------------------------------- #
# spectral normalization
# --------------------------------------------------------------------------- #

def test_power_iteration_matches_svd(rng):
    for _ in range(20):
        w = rng.standard_normal((rng.integers(2, 40), rng.integers(2, 40)))
        state = SpectralNormState.for_weight(w, seed=int(rng.integers(1000)), n_iterations=50)
        _, sigma = apply_spectral_norm(w, state)
        assert sigma == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-2)


def test_normalized_weight_has_unit_lipschitz_bound(rng):
    w = rng.standard_normal((16, 3, 3, 3))
    state = SpectralNormState.for_weight(w, n_iterations=100)
    wn, _ = apply_spectral_norm(w, state)
    assert np.linalg.svd(wn.reshape(16, -1), compute_uv=False)[0] <= 1 + 1e-2


def test_zero_weight_passes_through_unchanged():
    w = np.zeros((4, 6))
    wn, sigma = apply_spectral_norm(w, SpectralNormState.for_weight(w))
    assert np.all(wn == 0) and np.isfinite(sigma)


def test_identity_weight_sigma_is_one():
    w = np.eye(5)
    _, sigma = apply_spectral_norm(w, SpectralNormState.for_weight(w, n_iterations=3))
    assert sigma == pytest.approx(1.0, abs=1e-10)


def test_update_flag_controls_state():
    w = np.random.default_rng(0).standard_normal((5, 7))
    st_ = SpectralNormState.for_weight(w)
    u0 = st_.u.copy()
    apply_spectral_norm(w, st_, update=False)
    assert np.array_equal(st_.u, u0)
    apply_spectral_norm(w, st_)
    assert not np.array_equal(st_.u, u0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 9), elements=st.floats(-10, 10)))
def test_sn_estimate_never_exceeds_top_singular_value(w):
    state = SpectralNormState.for_weight(w, n_iterations=5)
    _, sigma = apply_spectral_norm(w, state)
    top = np.linalg.svd(w, compute_uv=False)[0]
    assert sigma <= top * (1 + 1e-9) + 1e-12


def test_snconv_forward_is_pure_until_power_iterate():
    conv = SNConv2d(3, 4, 3, 1, 1)
    conv.reset_sn(0, warmup=0)
    u0 = conv.weight_u.clone()
    x = torch.randn(1, 3, 8, 8)
    y1 = conv(x)
    y2 = conv(x)
    assert torch.equal(y1, y2) and torch.equal(conv.weight_u, u0)
    conv.power_iterate(3)
    assert not torch.equal(conv.weight_u, u0)


def test_snconv_sigma_converges_to_svd():
    conv = SNConv2d(3, 8, 3, 1, 1)
    conv.reset_sn(1, warmup=200)
    w = conv.weight.detach().reshape(8, -1).numpy()
    assert float(conv.sigma().detach()) == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-3)


def test_power_iteration_in_place():
    w = torch.randn(5, 4, dtype=torch.float64)
    u = torch.ones(5, dtype=torch.float64) / 5 ** 0.5
    v = torch.ones(4, dtype=torch.float64) / 2
    uu, vv = power_iteration(w, u, v, 2)
    assert uu is u and vv is v


# --------------------------------------------------------------------------- #
# pyramids and shapes
# --------------------------------------------------------------------------- #

def test_pyramid_matches_naive_block_mean(rng):
    img = rng.random((8, 8, 3))
    levels = downsample_pyramid(img, 3)
    assert [lv.shape for lv in levels] == [(8, 8, 3), (4, 4, 3), (2, 2, 3)]
    naive = np.zeros((4, 4, 3))
    for i in range(4):
        for j in range(4):
            naive[i, j] = img[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1))
    assert np.allclose(levels[1], naive, atol=1e-12)


def test_pyramid_rejects_indivisible_side():
    with pytest.raises(ValueError):
        downsample_pyramid(np.zeros((6, 6, 3)), 3)
    with pytest.raises(ValueError):
        downsample_pyramid(np.zeros((8, 8, 3)), 0)


def test_realfake_head_shapes_at_256():
    d = _grown(RealFakeDiscriminator, 4, ndf=2, max_channels=8)
    out = realfake_discriminate(rand_images(1, 256), d, ProgressiveState(3, 1.0, 32))
    assert out.shapes == [(61, 61), (13, 13), (1, 1)]
    assert len(out.features) == 5


def test_realfake_head_shapes_at_64_and_below():
    d = _grown(RealFakeDiscriminator, 2, ndf=2, max_channels=8)
    assert d(rand_images(1, 64), ProgressiveState(1, 1.0, 32)).shapes == [(61, 61), (13, 13), (1, 1)]
    assert d(rand_images(1, 32), ProgressiveState(0, 1.0, 32)).shapes[-1] == (1, 1)
    small = RealFakeDiscriminator(ndf=2, max_channels=8, min_resolution=16, max_resolution=32)
    assert small(rand_images(1, 16), ProgressiveState(0, 1.0, 16)).shapes[-1] == (1, 1)


def test_domain_discriminator_consumes_pyramid():
    d = _grown(MultiScaleDomainDiscriminator, 4, ndf=2, max_channels=8)
    seen = []
    hooks = [s.register_forward_pre_hook(lambda m, a: seen.append(tuple(a[0].shape))) for s in d.scales]
    x, y = rand_images(1, 256, 0), rand_images(1, 256, 1)
    out = domain_discriminate(x, y, d, ProgressiveState(3, 1.0, 32))
    for h in hooks:
        h.remove()
    assert [s[-1] for s in seen] == [256, 128, 64]
    assert all(s[1] == 6 for s in seen)
    assert len(out) == 3 and all(len(o.features) == 5 for o in out)
    assert [o.shapes[0] for o in out] == [(32, 32), (16, 16), (8, 8)]


def test_domain_scales_have_separate_weights():
    d = MultiScaleDomainDiscriminator(ndf=2, max_channels=8, min_resolution=16, max_resolution=16)
    w = [s.blocks[0].convs[0].weight for s in d.scales]
    assert w[0].data_ptr() != w[1].data_ptr()
    assert not torch.equal(w[0], w[1])


def test_domain_rejects_mismatched_pair():
    d = MultiScaleDomainDiscriminator(ndf=2, max_channels=8, min_resolution=16, max_resolution=16)
    with pytest.raises(ValueError):
        d(rand_images(1, 16), rand_images(2, 16), ProgressiveState(0, 1.0, 16))


def test_realfake_receptive_fields_by_exhaustive_perturbation():
    """At 64 px, a pixel moves head-1 cell (i, j) iff it lies in the 4x4 window at (i, j)."""
    torch.manual_seed(0)
    d = _grown(RealFakeDiscriminator, 2, ndf=2, max_channels=8).double()
    st_ = ProgressiveState(1, 1.0, 32)
    base = rand_images(1, 64, seed=4, dtype=torch.float64) * 0.5
    ref = d(base, st_).scores[0][0, 0]
    support = np.zeros((64, 64), dtype=bool)
    # which input pixels influence the top-left cell; batched over all 4096 pixels
    for start in range(0, 64 * 64, 512):
        idx = torch.arange(start, start + 512)
        batch = base.repeat(512, 1, 1, 1)
        batch[torch.arange(512), 0, idx // 64, idx % 64] += 0.3
        out = d(batch, st_).scores[0][:, 0]
        moved = (out - ref).abs().flatten(1) > 1e-12
        support.reshape(-1)[start:start + 512] = moved[:, 0].numpy()
        # every perturbation reaches exactly the cells whose window covers it
        for k in (0, 100, 511):
            p = int(idx[k])
            r, c = p // 64, p % 64
            expect = np.zeros((61, 61), dtype=bool)
            expect[max(0, r - 3):min(61, r + 1), max(0, c - 3):min(61, c + 1)] = True
            assert np.array_equal(moved[k].reshape(61, 61).numpy(), expect)
    assert support.sum() == 16 and support[:4, :4].all()


def test_realfake_global_head_sees_whole_image():
    d = _grown(RealFakeDiscriminator, 2, ndf=2, max_channels=8).double()
    st_ = ProgressiveState(1, 1.0, 32)
    base = torch.zeros(1, 3, 64, 64, dtype=torch.float64)
    ref = d(base, st_).scores[2]
    for r, c in [(0, 0), (63, 63), (0, 63), (31, 7)]:
        x = base.clone()
        x[0, :, r, c] = 0.9
        assert not torch.equal(d(x, st_).scores[2], ref)


def test_fade_zero_matches_pooled_previous_input_path():
    d = RealFakeDiscriminator(ndf=2, max_channels=8, min_resolution=16, max_resolution=32).double()
    d.grow()
    d.double()
    x = rand_images(1, 32, dtype=torch.float64)
    faded = d(x, ProgressiveState(1, 0.0, 16))
    old = F.leaky_relu(d.from_rgb[0](F.avg_pool2d(x, 2)), 0.2)
    manual = F.interpolate(old, scale_factor=2, mode="nearest")
    feats = []
    h = manual
    for i, block in enumerate(d.tail):
        h = block(h)
        if i == 4:
            h = h.mean(dim=(2, 3), keepdim=True)
        feats.append(h)
    assert torch.allclose(faded.features[0], feats[0])


def test_grow_preserves_discriminator_weights():
    for cls in (RealFakeDiscriminator, MultiScaleDomainDiscriminator):
        d = cls(ndf=2, max_channels=8, min_resolution=16, max_resolution=64)
        before = {k: v.clone() for k, v in d.state_dict().items()}
        d.grow()
        after = d.state_dict()
        for k, v in before.items():
            assert torch.equal(after[k], v), (cls.__name__, k)


def test_spectral_norm_can_be_disabled():
    d = RealFakeDiscriminator(ndf=2, max_channels=8, min_resolution=16, max_resolution=16,
                              spectral_norm=False)
    conv = d.heads[0]
    assert torch.equal(conv.normalized_weight(), conv.weight)
