"""Estimator facade: ``fit(anime, clothing)`` trains, ``predict(anime)`` translates."""

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_image_batch, check_random_seed, tensor_to_hwc, to_uint8
from .evaluation import MeanRGBExtractor, fid
from .progressive import resize_batch
from .training import PairedDataset, TrainConfig, Trainer, load_generator


class CostumeTranslator(BaseEstimator):
    """Anime character -> clothing image translator.

    Images may be numpy ``(N, H, W, 3)`` arrays (uint8, or floats in [-1, 1])
    or ``(N, 3, H, W)`` tensors in [-1, 1]; square power-of-two sides are
    resized to ``max_resolution``. ``predict`` answers in the input's
    representation.
    """

    def __init__(self, ngf=64, ndf=64, max_channels=512, min_resolution=32, max_resolution=256,
                 lr=2e-4, epochs_constant=70, epochs_decay=30, batch_sizes=(8, 8, 8, 4),
                 lambda_l1=10.0, ladder="full", augment=True, max_steps=None, seed=0):
        self.ngf = ngf
        self.ndf = ndf
        self.max_channels = max_channels
        self.min_resolution = min_resolution
        self.max_resolution = max_resolution
        self.lr = lr
        self.epochs_constant = epochs_constant
        self.epochs_decay = epochs_decay
        self.batch_sizes = batch_sizes
        self.lambda_l1 = lambda_l1
        self.ladder = ladder
        self.augment = augment
        self.max_steps = max_steps
        self.seed = seed

    def _config(self):
        p = self.get_params()
        p["seed"] = check_random_seed(p["seed"])
        p["batch_sizes"] = tuple(p["batch_sizes"])
        return TrainConfig(checkpoint_every=0, **p)

    def _tensor(self, X, name):
        t = check_image_batch(X, name=name)
        return resize_batch(t, self.max_resolution)

    def fit(self, X, y):
        xt, yt = self._tensor(X, "X"), self._tensor(y, "y")
        if len(xt) != len(yt):
            raise ValueError(f"X has {len(xt)} images but y has {len(yt)}")
        self.trainer_ = Trainer(self._config(), PairedDataset(xt, yt))
        self.trainer_.fit()
        self._sync()
        return self

    def _sync(self):
        self.generator_ = self.trainer_.generator.eval()
        self.state_ = self.trainer_.state
        self.history_ = self.trainer_.history
        self.n_steps_ = self.trainer_.step

    def _check_fitted(self):
        if not hasattr(self, "generator_"):
            raise NotFittedError("CostumeTranslator is not fitted yet")

    def predict(self, X):
        self._check_fitted()
        xt = resize_batch(check_image_batch(X, name="X"), self.state_.resolution)
        with torch.no_grad():
            out = self.generator_(xt.to(next(self.generator_.parameters()).dtype), self.state_)
        if isinstance(X, torch.Tensor):
            return out
        hwc = tensor_to_hwc(out)
        return to_uint8(hwc) if np.asarray(X).dtype == np.uint8 else hwc.astype(np.float32)

    def score(self, X, y):
        """Negative mean-colour FID between predictions and ``y`` (higher is better)."""
        pred = self.predict(X)
        target = resize_batch(check_image_batch(y, name="y"), self.state_.resolution)
        return -fid(check_image_batch(pred), target, MeanRGBExtractor())

    def save(self, path):
        self._check_fitted()
        return self.trainer_.save_checkpoint(path)

    @classmethod
    def from_checkpoint(cls, path, stage=None):
        g, state, cfg = load_generator(path, stage)
        est = cls(**{k: getattr(cfg, k) for k in cls._get_param_names()})
        est.generator_, est.state_, est.history_, est.n_steps_ = g, state, [], None
        return est
