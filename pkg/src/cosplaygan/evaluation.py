"""FID and LPIPS over pluggable feature extractors, plus per-run reports and
comparison tables."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image_batch

SYMMETRY_TOL = 1e-8
PSD_FLOOR = -1e-6
REPORT_VERSION = 1


# --------------------------------------------------------------------------- #
# Gaussian statistics
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class GaussianStats:
    """Mean, covariance and sample count of an embedding cloud."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValueError("statistics contain non-finite values")
        if np.abs(cov - cov.T).max(initial=0.0) > SYMMETRY_TOL:
            raise ValueError("covariance is not symmetric")
        if d and np.linalg.eigvalsh((cov + cov.T) / 2).min() < PSD_FLOOR:
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]


def _as_features(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2:
        raise ValueError(f"features must be an (n, d) matrix, got shape {f.shape}")
    if not np.isfinite(f).all():
        raise ValueError("features contain non-finite values")
    return f


def gaussian_stats(features):
    """Sample mean and unbiased covariance of an ``(n, d)`` feature matrix (``n >= 2``)."""
    f = _as_features(features)
    if f.shape[0] < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {f.shape[0]}")
    cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
    return GaussianStats(f.mean(axis=0), (cov + cov.T) / 2, f.shape[0])


class StatsAccumulator:
    """Streaming ``(count, sum, outer-product sum)`` triple.

    ``merge`` is associative, so partial results from parallel shards combine
    to the same statistics regardless of grouping.
    """

    def __init__(self, dim):
        self.count = 0
        self.total = np.zeros(dim)
        self.outer = np.zeros((dim, dim))

    def update(self, features):
        f = _as_features(features)
        if f.shape[1] != self.total.shape[0]:
            raise ValueError(f"feature dimension {f.shape[1]} != {self.total.shape[0]}")
        self.count += f.shape[0]
        self.total += f.sum(axis=0)
        self.outer += f.T @ f
        return self

    def merge(self, other):
        if other.total.shape != self.total.shape:
            raise ValueError("cannot merge accumulators of different dimension")
        out = StatsAccumulator(self.total.shape[0])
        out.count = self.count + other.count
        out.total = self.total + other.total
        out.outer = self.outer + other.outer
        return out

    def stats(self):
        if self.count < 2:
            raise ValueError(f"need at least 2 samples for a covariance, got {self.count}")
        mean = self.total / self.count
        cov = (self.outer - self.count * np.outer(mean, mean)) / (self.count - 1)
        cov = (cov + cov.T) / 2
        # cancellation can leave tiny negative eigenvalues on degenerate clouds
        w, v = np.linalg.eigh(cov)
        if w.min(initial=0.0) < 0:
            cov = (v * np.clip(w, 0, None)) @ v.T
            cov = (cov + cov.T) / 2
        return GaussianStats(mean, cov, self.count)


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_one_sided(cov_a, cov_b):
    sa = _psd_sqrt(cov_a)
    m = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def trace_sqrt_product(cov_a, cov_b):
    """``Tr((A B)^{1/2})`` for PSD ``A``, ``B`` via the symmetric form ``A^{1/2} B A^{1/2}``.

    Both orderings give the same value in exact arithmetic; averaging them keeps
    the result symmetric when a covariance is rank deficient and the clipped
    square root of its null space carries rounding noise.
    """
    return 0.5 * (_trace_sqrt_one_sided(cov_a, cov_b) + _trace_sqrt_one_sided(cov_b, cov_a))


def frechet_distance(a, b):
    """Squared Wasserstein-2 distance between two Gaussians, clipped at 0."""
    if not isinstance(a, GaussianStats) or not isinstance(b, GaussianStats):
        raise TypeError("frechet_distance expects two GaussianStats")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * trace_sqrt_product(a.cov, b.cov)
    return max(float(d), 0.0)


# --------------------------------------------------------------------------- #
# feature extractors
# --------------------------------------------------------------------------- #

class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Base for embedding models.

    ``transform`` maps images to an ``(n, d)`` embedding for FID; ``layers``
    returns per-layer ``(n, C, H, W)`` activations for LPIPS. Subclasses must be
    deterministic per input image.
    """

    name = "base"

    def fit(self, X=None, y=None):
        return self

    def _images(self, X):
        return check_image_batch(X, require_square=False, dtype=torch.float64)

    def layers(self, X):
        return [self._images(X)]

    def transform(self, X):
        raise NotImplementedError

    @property
    def identity(self):
        return {"name": self.name, "params": self.get_params()}


class MeanRGBExtractor(FeatureExtractor):
    """Per-image mean colour, a 3-d embedding with analytically known statistics."""

    name = "mean-rgb"
    dim = 3

    def transform(self, X):
        return self._images(X).mean(dim=(2, 3)).numpy()


class PixelExtractor(FeatureExtractor):
    """Identity features: the raw pixels (flattened for FID)."""

    name = "pixels"

    def transform(self, X):
        t = self._images(X)
        return t.reshape(t.shape[0], -1).numpy()


class RandomConvExtractor(FeatureExtractor):
    """Fixed random conv stack as a stand-in perceptual network.

    Weights are drawn once from ``seed``; embeddings are the globally pooled
    activations of the last layer.
    """

    name = "random-conv"

    def __init__(self, channels=(16, 32), seed=0):
        self.channels = channels
        self.seed = seed

    def _weights(self):
        gen = torch.Generator().manual_seed(int(self.seed))
        ws, cin = [], 3
        for c in self.channels:
            std = math.sqrt(2.0 / (cin * 9))
            ws.append(torch.randn(c, cin, 3, 3, generator=gen, dtype=torch.float64) * std)
            cin = c
        return ws

    def layers(self, X):
        h = self._images(X)
        out = []
        for w in self._weights():
            h = F.leaky_relu(F.conv2d(h, w, stride=2, padding=1), 0.2)
            out.append(h)
        return out

    def transform(self, X):
        return self.layers(X)[-1].mean(dim=(2, 3)).numpy()

    @property
    def dim(self):
        return self.channels[-1]


def embed(images, extractor, batch_size=64):
    t = check_image_batch(images, require_square=False, dtype=torch.float64)
    chunks = [extractor.transform(t[i:i + batch_size]) for i in range(0, len(t), batch_size)]
    return np.concatenate(chunks, axis=0)


def fid(set_a, set_b, extractor=None):
    """FID between two image sets (each ``>= 2`` images); lower is better."""
    extractor = extractor if extractor is not None else MeanRGBExtractor()
    return frechet_distance(gaussian_stats(embed(set_a, extractor)),
                            gaussian_stats(embed(set_b, extractor)))


def _unit_normalize(f, eps=1e-10):
    return f / (torch.sqrt((f * f).sum(dim=1, keepdim=True)) + eps)


def lpips_pairs(img_a, img_b, extractor=None, layer_weights=None):
    """Per-pair perceptual distance, shape ``(n,)``.

    Each layer's features are unit-normalized across channels at every spatial
    position; squared differences are weighted per channel, summed over
    channels, averaged over space and summed over layers. ``layer_weights`` is
    one entry per layer: a scalar or a length-``C`` vector (default all ones).
    """
    extractor = extractor if extractor is not None else PixelExtractor()
    a = check_image_batch(img_a, name="img_a", require_square=False, dtype=torch.float64)
    b = check_image_batch(img_b, name="img_b", require_square=False, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    la, lb = extractor.layers(a), extractor.layers(b)
    if layer_weights is None:
        layer_weights = [1.0] * len(la)
    if len(layer_weights) != len(la):
        raise ValueError(f"{len(layer_weights)} layer weights for {len(la)} layers")
    total = torch.zeros(a.shape[0], dtype=torch.float64)
    for fa, fb, w in zip(la, lb, layer_weights):
        w = torch.as_tensor(w, dtype=torch.float64).reshape(-1)
        if w.numel() not in (1, fa.shape[1]):
            raise ValueError(f"layer weight of size {w.numel()} for {fa.shape[1]} channels")
        if (w < 0).any():
            raise ValueError("layer weights must be non-negative")
        sq = (_unit_normalize(fa) - _unit_normalize(fb)) ** 2
        total += (sq * w.view(1, -1, 1, 1)).sum(dim=1).mean(dim=(1, 2))
    return total.numpy()


def lpips(img_a, img_b, extractor=None, layer_weights=None):
    """Mean perceptual distance over the pairs in ``img_a``/``img_b``."""
    return float(lpips_pairs(img_a, img_b, extractor, layer_weights).mean())


# --------------------------------------------------------------------------- #
# reports
# --------------------------------------------------------------------------- #

def evaluation_report(generated, targets, fid_extractor=None, lpips_extractor=None, label=""):
    """Metrics document for one run: FID between sets, LPIPS averaged over aligned pairs."""
    fid_extractor = fid_extractor if fid_extractor is not None else MeanRGBExtractor()
    lpips_extractor = lpips_extractor if lpips_extractor is not None else PixelExtractor()
    gen = check_image_batch(generated, name="generated", require_square=False, dtype=torch.float64)
    tgt = check_image_batch(targets, name="targets", require_square=False, dtype=torch.float64)
    return {
        "version": REPORT_VERSION,
        "label": label,
        "fid": fid(gen, tgt, fid_extractor),
        "lpips": lpips(gen, tgt, lpips_extractor),
        "n_generated": int(gen.shape[0]),
        "n_reference": int(tgt.shape[0]),
        "fid_extractor": fid_extractor.identity,
        "lpips_extractor": lpips_extractor.identity,
    }


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str))
    return path


def read_report(path):
    return json.loads(Path(path).read_text())


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def render_table(reports, sort_by="fid"):
    """Markdown comparison table, best FID and LPIPS in bold.

    ``sort_by="fid"`` orders complete rows by ascending FID (incomplete rows go
    last); ``sort_by="label"`` keeps label order, which lines up ladder rows.
    Rows lacking either metric are marked incomplete.
    """
    rows = [dict(r) for r in reports]
    for r in rows:
        r["complete"] = _is_number(r.get("fid")) and _is_number(r.get("lpips"))
    if sort_by == "fid":
        rows.sort(key=lambda r: (not r["complete"], r.get("fid") if r["complete"] else 0.0))
    elif sort_by == "label":
        rows.sort(key=lambda r: str(r.get("label", "")))
    elif sort_by is not None:
        raise ValueError(f"unknown sort key {sort_by!r}")
    done = [r for r in rows if r["complete"]]
    best_fid = min((r["fid"] for r in done), default=None)
    best_lpips = min((r["lpips"] for r in done), default=None)

    lines = ["| Configuration | FID | LPIPS |", "|---|---:|---:|"]
    for r in rows:
        label = r.get("label") or "?"
        if not r["complete"]:
            fid_s = f"{r['fid']:.2f}" if _is_number(r.get("fid")) else "incomplete"
            lp_s = f"{r['lpips']:.4f}" if _is_number(r.get("lpips")) else "incomplete"
            lines.append(f"| {label} (incomplete) | {fid_s} | {lp_s} |")
            continue
        fid_s = f"{r['fid']:.2f}"
        lp_s = f"{r['lpips']:.4f}"
        if r["fid"] == best_fid:
            fid_s = f"**{fid_s}**"
        if r["lpips"] == best_lpips:
            lp_s = f"**{lp_s}**"
        lines.append(f"| {label} | {fid_s} | {lp_s} |")
    return "\n".join(lines) + "\n"


__all__ = [
    "FeatureExtractor",
    "GaussianStats",
    "MeanRGBExtractor",
    "PixelExtractor",
    "RandomConvExtractor",
    "StatsAccumulator",
    "embed",
    "evaluation_report",
    "fid",
    "frechet_distance",
    "gaussian_stats",
    "lpips",
    "lpips_pairs",
    "read_report",
    "render_table",
    "trace_sqrt_product",
    "write_report",
]
