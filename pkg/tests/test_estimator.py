import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cosplaygan import CostumeTranslator
from cosplaygan.synthetic import make_costume_pairs

TINY = dict(ngf=4, ndf=2, max_channels=8, min_resolution=16, max_resolution=32,
            epochs_constant=1, epochs_decay=1, batch_sizes=(4, 4), seed=3)


@pytest.fixture(scope="module")
def pairs():
    x, y, _ = make_costume_pairs(8, 32, seed=0)
    return x, y


@pytest.fixture(scope="module")
def fitted(pairs):
    return CostumeTranslator(**TINY).fit(*pairs)


def test_params_round_trip():
    est = CostumeTranslator(**TINY)
    assert est.get_params()["ngf"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(lr=1e-3)
    assert est.lr == 1e-3


def test_unfitted_predict_raises(pairs):
    with pytest.raises(NotFittedError):
        CostumeTranslator(**TINY).predict(pairs[0])


def test_fit_predict_tensor(fitted, pairs):
    assert fitted.state_.resolution == 32
    assert fitted.n_steps_ > 0 and len(fitted.history_) == fitted.n_steps_
    out = fitted.predict(pairs[0][:3])
    assert out.shape == (3, 3, 32, 32)
    assert out.abs().max() <= 1


def test_predict_matches_input_representation(fitted, pairs):
    hwc = ((pairs[0][:2].permute(0, 2, 3, 1).numpy() + 1) * 127.5).round().astype(np.uint8)
    out = fitted.predict(hwc)
    assert out.dtype == np.uint8 and out.shape == (2, 32, 32, 3)
    out = fitted.predict(hwc.astype(np.float32) / 127.5 - 1)
    assert out.dtype == np.float32 and out.shape == (2, 32, 32, 3)


def test_predict_resizes_other_sides(fitted, pairs):
    small = torch.nn.functional.avg_pool2d(pairs[0][:2], 2)
    assert fitted.predict(small).shape == (2, 3, 32, 32)


def test_fit_is_seeded(pairs):
    a = CostumeTranslator(**TINY).fit(*pairs).predict(pairs[0][:2])
    b = CostumeTranslator(**TINY).fit(*pairs).predict(pairs[0][:2])
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_score_is_negative_fid(fitted, pairs):
    s = fitted.score(*pairs)
    assert np.isfinite(s) and s <= 0


def test_validation(pairs):
    x, y = pairs
    with pytest.raises(ValueError):
        CostumeTranslator(**TINY).fit(x, y[:4])
    with pytest.raises(ValueError):
        CostumeTranslator(**TINY).fit(x * 3, y)
    with pytest.raises(ValueError):
        CostumeTranslator(**{**TINY, "ladder": "z"}).fit(x, y)


def test_checkpoint_round_trip(fitted, pairs, tmp_path):
    path = fitted.save(tmp_path / "model.pt")
    loaded = CostumeTranslator.from_checkpoint(path)
    assert loaded.get_params() == fitted.get_params()
    torch.testing.assert_close(loaded.predict(pairs[0][:2]), fitted.predict(pairs[0][:2]))
