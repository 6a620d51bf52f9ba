import dataclasses
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from utils import rand_images, state

from cosplaygan.discriminators import (
    MultiScaleDomainDiscriminator,
    RealFakeDiscriminator,
)
from cosplaygan.generator import UNetGenerator
from cosplaygan.losses import (
    DEFAULT_LAYER_WEIGHTS,
    LADDER,
    LossWeights,
    PairBatch,
    TermFlags,
    feature_matching_term,
    input_consistency_term,
    l1_term,
    ladder_flags,
    ladder_label,
    lsgan_term,
    random_derangement,
    sample_unassociated,
    total_losses,
)

ARCH = dict(min_resolution=16, max_resolution=16)


def _models(sn=True, seed=0):
    g = UNetGenerator(ngf=4, max_channels=8, seed=seed, **ARCH).double()
    dd = MultiScaleDomainDiscriminator(ndf=2, max_channels=8, spectral_norm=sn, seed=seed + 1,
                                       **ARCH).double()
    dr = RealFakeDiscriminator(ndf=2, max_channels=8, spectral_norm=sn, seed=seed + 2, **ARCH).double()
    return g, dd, dr


def _fixture(n=3):
    g, dd, dr = _models()
    x = rand_images(n, 16, 1, torch.float64)
    y = rand_images(n, 16, 2, torch.float64)
    y_un = torch.roll(y, 1, dims=0)
    return g, dd, dr, x, y, y_un


# --------------------------------------------------------------------------- #
# identities
# --------------------------------------------------------------------------- #

def test_lsgan_zero_at_target():
    maps = [torch.ones(2, 1, 5, 5), torch.ones(2, 1, 1, 1)]
    assert lsgan_term(maps, 1.0).item() == 0.0
    assert lsgan_term([torch.zeros(3, 1, 4, 4)], 0.0).item() == 0.0


def test_lsgan_value_pools_all_cells():
    a, b = torch.full((1, 1, 2, 2), 2.0), torch.zeros(1, 1, 1, 1)
    # cells: four at (2-1)^2 = 1 and one at (0-1)^2 = 1
    assert lsgan_term([a, b], 1.0).item() == pytest.approx(1.0)
    assert lsgan_term([a], 0.0).item() == pytest.approx(4.0)


def test_lsgan_rejects_empty():
    with pytest.raises(ValueError):
        lsgan_term([], 1.0)


def test_l1_identity_and_shape_check():
    y = rand_images(2, 8)
    assert l1_term(y, y).item() == 0.0
    assert l1_term(torch.zeros(1, 3, 2, 2), torch.ones(1, 3, 2, 2)).item() == 1.0
    with pytest.raises(ValueError):
        l1_term(y, y[:1])


def test_feature_matching_identity_and_weights():
    feats = [torch.randn(2, 3, 4, 4) for _ in range(5)]
    w = LossWeights()
    assert feature_matching_term(feats, feats, w).item() == 0.0
    shifted = [f + 1.0 for f in feats]
    assert feature_matching_term(feats, shifted, w).item() == pytest.approx(sum(DEFAULT_LAYER_WEIGHTS))


def test_feature_matching_checks_taps_and_shapes():
    w = LossWeights()
    with pytest.raises(ValueError):
        feature_matching_term([torch.zeros(1)] * 4, [torch.zeros(1)] * 4, w)
    with pytest.raises(ValueError):
        feature_matching_term([torch.zeros(2)] * 5, [torch.zeros(3)] * 5, w)


def test_feature_matching_does_not_push_real_side():
    real = [torch.randn(1, 2, 3, 3, requires_grad=True) for _ in range(5)]
    fake = [torch.randn(1, 2, 3, 3, requires_grad=True) for _ in range(5)]
    feature_matching_term(real, fake, LossWeights()).backward()
    assert all(r.grad is None for r in real)
    assert all(f.grad is not None for f in fake)


def test_input_consistency_zero_when_output_equals_input():
    _, _, dr, x, _, _ = _fixture()
    feats = dr(x, state()).features
    assert input_consistency_term(feats, feats, LossWeights()).item() == 0.0


def test_total_losses_identity_fixture():
    """Discriminators that answer the target everywhere and G(x) = y zero every G term."""
    g, dd, dr, x, y, y_un = _fixture()
    flags = TermFlags(domain_adv=False, realfake=False)
    _, _, _, rec = total_losses(y, y, y, dd, dr, state(), LossWeights(flags=flags))
    assert rec.generator == {"fm_domain": 0.0, "input_consistency": 0.0, "l1": 0.0}


# --------------------------------------------------------------------------- #
# term-sum oracle
# --------------------------------------------------------------------------- #

def _oracle(x, y, fake, y_un, dd, dr, w):
    with torch.no_grad():
        np_ = lambda t: t.detach().numpy()
        d_real, d_fake, d_un = dd(x, y, state()), dd(x, fake, state()), dd(x, y_un, state())
        r_real, r_fake, r_in = dr(y, state()), dr(fake, state()), dr(x, state())

        def sq(maps, target):
            return np.mean([np.mean((np_(m.scores[0]) - target) ** 2) for m in maps])

        def heads(out, target):
            return np.mean([np.mean((np_(s) - target) ** 2) for s in out.scores])

        def fm(a, b):
            return sum(n * np.mean(np.abs(np_(p) - np_(q)))
                       for n, p, q in zip(w.layer_weights, a, b))

        g = (sq(d_fake, 1) + heads(r_fake, 1)
             + sum(fm(a.features, b.features) for a, b in zip(d_real, d_fake))
             + fm(r_in.features, r_fake.features)
             + w.lambda_l1 * np.mean(np.abs(np_(y) - np_(fake))))
        d_d = sq(d_real, 1) + sq(d_fake, 0) + sq(d_un, 0)
        d_r = heads(r_real, 1) + heads(r_fake, 0)
    return g, d_d, d_r


def test_total_losses_matches_term_sum_oracle():
    g, dd, dr, x, y, y_un = _fixture()
    fake = g(x, state())
    w = LossWeights()
    gl, dl, rl, rec = total_losses(x, y, fake, dd, dr, state(), w, y_unassoc=y_un)
    og, od, orr = _oracle(x, y, fake, y_un, dd, dr, w)
    assert gl.item() == pytest.approx(og, abs=1e-6)
    assert dl.item() == pytest.approx(od, abs=1e-6)
    assert rl.item() == pytest.approx(orr, abs=1e-6)
    assert rec.generator_total == pytest.approx(gl.item(), abs=1e-12)
    assert len(rec.per_scale["domain_adv"]) == 3 and len(rec.per_scale["realfake_adv"]) == 3


def test_discriminator_losses_do_not_reach_generator_through_real_targets():
    g, dd, dr, x, y, y_un = _fixture()
    fake = g(x, state())
    _, dl, rl, _ = total_losses(x, y, fake, dd, dr, state(), y_unassoc=y_un)
    grads = torch.autograd.grad(dl + rl, list(dd.parameters()) + list(dr.parameters()),
                                allow_unused=True)
    assert any(gr is not None and gr.abs().sum() > 0 for gr in grads)


def test_missing_realfake_discriminator_is_an_error():
    g, dd, _, x, y, _ = _fixture()
    with pytest.raises(ValueError):
        total_losses(x, y, g(x, state()), dd, None, state())


# --------------------------------------------------------------------------- #
# ladder
# --------------------------------------------------------------------------- #

EXPECTED_ADDITIONS = {
    "a": {"g/domain_adv", "g/l1", "dd/real", "dd/fake", "scale/domain_adv/0"},
    "b": {"mod/progressive"},
    "c": {"mod/calibrated"},
    "d": {"g/realfake_adv", "dr/real", "dr/fake", "scale/realfake_adv/0"},
    "e": {"dd/unassoc"},
    "f": {"mod/spectral_norm"},
    "g": {"scale/domain_adv/1", "scale/domain_adv/2"},
    "h": {"scale/realfake_adv/1", "scale/realfake_adv/2"},
    "i": {"g/fm_domain", "g/fm_realfake"},
    "j": {"g/input_consistency"},
}


def _schema(flags):
    g, dd, dr, x, y, y_un = _fixture(2)
    _, _, _, rec = total_losses(x, y, g(x, state()), dd, dr, state(), LossWeights(flags=flags),
                                y_unassoc=y_un)
    return rec.schema()


def test_ladder_rows_add_terms_cumulatively():
    previous = frozenset()
    for row in "abcdefghij":
        schema = _schema(ladder_flags(row))
        assert schema - previous == EXPECTED_ADDITIONS[row], row
        assert previous <= schema
        previous = schema


def test_ladder_labels():
    assert ladder_label("a") == "(a) Baseline"
    assert ladder_label("j") == "(j) +Input consistency loss"
    assert [LADDER[k][0][:3] for k in "abcdefghij"] == [f"({k})" for k in "abcdefghij"]
    with pytest.raises(ValueError):
        ladder_flags("z")


def test_full_objective_omits_realfake_feature_matching():
    schema = _schema(ladder_flags("full"))
    assert "g/fm_realfake" not in schema
    assert "g/input_consistency" in schema and "dd/unassoc" in schema


# --------------------------------------------------------------------------- #
# unassociated pairs
# --------------------------------------------------------------------------- #

@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 2 ** 32 - 1))
def test_derangement_has_no_fixed_points(n, seed):
    perm = random_derangement(n, np.random.default_rng(seed))
    assert sorted(perm) == list(range(n))
    assert not np.any(perm == np.arange(n))


def test_derangement_is_uniform_for_three():
    rng = np.random.default_rng(0)
    counts = Counter(tuple(random_derangement(3, rng)) for _ in range(4000))
    assert set(counts) == {(1, 2, 0), (2, 0, 1)}
    assert abs(counts[(1, 2, 0)] - 2000) < 200


def test_derangement_needs_two():
    with pytest.raises(ValueError):
        random_derangement(1, np.random.default_rng(0))


def test_sample_unassociated_pairbatch_and_tuples():
    x, y = rand_images(4, 8, 0), rand_images(4, 8, 1)
    out = sample_unassociated(PairBatch.from_pairs(x, y), np.random.default_rng(0))
    assert not out.associated.any()
    assert not np.any(out.y_source == np.arange(4))
    assert torch.equal(out.y, y[out.y_source])
    pairs = sample_unassociated([("x0", "y0"), ("x1", "y1"), ("x2", "y2")], np.random.default_rng(1))
    assert all(not assoc and xv[1] != yv[1] for xv, yv, assoc in pairs)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_l1=-1)
    with pytest.raises(ValueError):
        LossWeights(layer_weights=(1, -1, 1, 1, 1))
    assert dataclasses.replace(LossWeights(), lambda_l1=0).lambda_l1 == 0


def test_no_true_pair_leaks_over_many_draws():
    rng = np.random.default_rng(11)
    leaks = 0
    for _ in range(10_000):
        n = int(rng.integers(2, 9))
        perm = random_derangement(n, rng)
        leaks += int(np.sum(perm == np.arange(n)))
    assert leaks == 0


GATES = {"domain_adv": "domain_adv", "realfake": "realfake_adv", "fm_domain": "fm_domain",
         "fm_realfake": "fm_realfake", "input_consistency": "input_consistency", "l1": "l1"}


@pytest.mark.parametrize("flag", sorted(GATES))
def test_disabling_a_term_removes_exactly_its_value(flag):
    g, dd, dr, x, y, y_un = _fixture()
    fake = g(x, state())
    full = dataclasses.replace(ladder_flags("full"), fm_realfake=True)
    on, _, _, rec = total_losses(x, y, fake, dd, dr, state(), LossWeights(flags=full), y_unassoc=y_un)
    off, _, _, _ = total_losses(x, y, fake, dd, dr, state(),
                                LossWeights(flags=dataclasses.replace(full, **{flag: False})),
                                y_unassoc=y_un)
    assert (on - off).item() == pytest.approx(rec.generator[GATES[flag]], abs=1e-12)
