"""Dataset cleaning stages: filtering, active-learning label merges, region
cropping, duplicate grouping, calibration and the train/test split."""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, ClusterMixin

from .._validation import sub_rng
from .manifest import LABELS, KeypointSet, RegionBox
from .plugins import PluginError, load_rgb, parse_score

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_RATIO = 32608 / 35633


class UndetectedError(ValueError):
    pass


def content_key(array):
    """Stable content address of a decoded image."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    h = hashlib.sha256(repr(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------- #
# filtering and active learning
# --------------------------------------------------------------------------- #

def filter_scores(scores, threshold=0.5):
    """``True`` where a pair-probability passes (``>= threshold``)."""
    s = np.asarray(scores, dtype=np.float64)
    if ((s < 0) | (s > 1)).any():
        raise ValueError("scores must lie in [0, 1]")
    return s >= threshold


def filter_pairs(manifest, classifier, threshold=0.5, root=None, warn=None, on_update=None):
    """Score every ``new`` record and mark it ``filtered`` or ``rejected``.

    ``classifier`` takes an image path and returns a pair-probability (or a
    ``{"score": p}`` document). Unreadable files become ``corrupt``; records
    whose classifier call fails stay ``new`` for the next run. ``on_update`` is
    called with each record right after its status changes. Returns the ids
    that changed status.
    """
    from pathlib import Path

    warn = warn or (lambda msg, record: logger.warning(msg))
    changed = []
    for r in manifest.with_status("new"):
        path = Path(r.path) if root is None or Path(r.path).is_absolute() else Path(root) / r.path
        try:
            load_rgb(path)
        except (OSError, ValueError) as err:
            r.advance("corrupt")
            warn(f"{r.id}: unreadable image ({err})", r)
            changed.append(r.id)
            if on_update:
                on_update(r)
            continue
        try:
            r.score = parse_score(classifier(str(path)))
        except (PluginError, KeyError, TypeError, ValueError) as err:
            warn(f"{r.id}: classifier failed ({err})", r)
            continue
        r.advance("filtered" if r.score >= threshold else "rejected")
        changed.append(r.id)
        if on_update:
            on_update(r)
    return changed


@dataclass
class LabelSet:
    """Human labels for the pair classifier, one entry per record id."""

    labels: dict = field(default_factory=dict)
    rounds: dict = field(default_factory=dict)
    round: int = 0
    conflicts: list = field(default_factory=list)

    def positives(self):
        return sorted(k for k, v in self.labels.items() if v)

    def negatives(self):
        return sorted(k for k, v in self.labels.items() if not v)

    def to_dict(self):
        return {"labels": self.labels, "rounds": self.rounds, "round": self.round,
                "conflicts": self.conflicts}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d.get("labels", {})), dict(d.get("rounds", {})), int(d.get("round", 0)),
                   list(d.get("conflicts", [])))


def active_learning_round(manifest, relabels, prior=None):
    """Merge one round of human corrections into the classifier's label set.

    ``relabels`` is a mapping or a sequence of ``(record_id, is_pair)``; later
    entries win over earlier ones and over prior rounds, and every overwrite of
    a different label is kept in ``conflicts``.
    """
    prior = prior if prior is not None else LabelSet()
    out = LabelSet(dict(prior.labels), dict(prior.rounds), prior.round + 1, list(prior.conflicts))
    items = relabels.items() if isinstance(relabels, dict) else relabels
    for rid, label in items:
        if rid not in manifest:
            raise KeyError(f"relabel refers to unknown record {rid!r}")
        label = bool(label)
        if rid in out.labels and out.labels[rid] != label:
            conflict = {"id": rid, "old": out.labels[rid], "new": label,
                        "old_round": out.rounds.get(rid), "round": out.round}
            out.conflicts.append(conflict)
            logger.warning("label conflict for %s: %s -> %s", rid, out.labels[rid], label)
        out.labels[rid] = label
        out.rounds[rid] = out.round
    return out


# --------------------------------------------------------------------------- #
# cropping
# --------------------------------------------------------------------------- #

def best_boxes(boxes):
    """Highest-confidence box per label (ties keep the first listed)."""
    best = {}
    for b in boxes:
        if b.label not in best or b.confidence > best[b.label].confidence:
            best[b.label] = b
    return best


def crop_regions(image, detector):
    """Cut the character and clothing regions out of a listing image.

    ``detector`` is either a list of boxes or a callable returning one for
    ``image``. Raises :class:`UndetectedError` if a label has no box.
    """
    img = np.asarray(image)
    found = detector(img) if callable(detector) else detector
    h, w = img.shape[:2]
    boxes = [(b if isinstance(b, RegionBox) else RegionBox.from_dict(b)).check_within(w, h)
             for b in found]
    best = best_boxes(boxes)
    missing = [lab for lab in LABELS if lab not in best]
    if missing:
        raise UndetectedError(f"no {' or '.join(missing)} box detected")
    crops = tuple(img[b.top:b.top + b.height, b.left:b.left + b.width] for b in
                  (best["character"], best["clothing"]))
    return crops[0], crops[1], best


# --------------------------------------------------------------------------- #
# duplicates
# --------------------------------------------------------------------------- #

LUMA = np.array([0.299, 0.587, 0.114])


def image_signature(image, bins=32):
    """Normalised RGB and luminance histograms plus luminance spread."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    edges = np.linspace(0, 256, bins + 1)
    n = img.shape[0] * img.shape[1]
    rgb = np.concatenate([np.histogram(img[..., c], edges)[0] for c in range(3)]) / n
    lum = img @ LUMA
    return rgb, np.histogram(lum, edges)[0] / n, float(lum.std())


def _signatures(images, bins):
    sigs = [image_signature(im, bins) for im in images]
    rgb = np.stack([s[0] for s in sigs]).reshape(len(sigs), 3, bins)
    lum = np.stack([s[1] for s in sigs])
    std = np.array([s[2] for s in sigs])
    return rgb, lum, std


def similarity_matrix(images, bins=32):
    """Pairwise similarity: the minimum of colour-histogram intersection,
    brightness-histogram intersection and the luminance-std ratio."""
    rgb, lum, std = _signatures(images, bins)
    n = len(std)
    colour = np.empty((n, n))
    bright = np.empty((n, n))
    for i in range(n):
        colour[i] = np.minimum(rgb[i][None], rgb).sum(axis=-1).mean(axis=-1)
        bright[i] = np.minimum(lum[i][None], lum).sum(axis=-1)
    hi = np.maximum(std[:, None], std[None, :])
    lo = np.minimum(std[:, None], std[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        contrast = np.where(hi > 0, lo / hi, 1.0)
    return np.minimum(np.minimum(colour, bright), contrast)


class DuplicateGrouper(ClusterMixin, BaseEstimator):
    """Group near-identical images; similar pairs are joined transitively.

    Attributes:
        labels_: group index per image, numbered by first appearance.
        similarity_: the pairwise similarity matrix.
    """

    def __init__(self, threshold=0.90, bins=32):
        self.threshold = threshold
        self.bins = bins

    def fit(self, X, y=None):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")
        images = list(X)
        if not images:
            self.labels_ = np.zeros(0, dtype=int)
            self.similarity_ = np.zeros((0, 0))
            return self
        sim = similarity_matrix(images, self.bins)
        i, j = np.nonzero(np.triu(sim >= self.threshold, k=1))
        graph = coo_matrix((np.ones(len(i)), (i, j)), shape=sim.shape)
        _, raw = connected_components(graph, directed=False)
        # renumber so groups appear in input order
        order = {}
        self.labels_ = np.array([order.setdefault(g, len(order)) for g in raw])
        self.similarity_ = sim
        return self


def dedup(images, threshold=0.90):
    """Duplicate groups as lists of indices into ``images``, in input order."""
    labels = DuplicateGrouper(threshold).fit_predict(images)
    groups = {}
    for idx, g in enumerate(labels):
        groups.setdefault(int(g), []).append(idx)
    return [groups[g] for g in sorted(groups)]


# --------------------------------------------------------------------------- #
# calibration
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Calibration:
    image: np.ndarray
    center_x: float
    fallback: bool
    scale: float


def bicubic_x2(image):
    im = Image.fromarray(np.asarray(image, dtype=np.uint8))
    return np.asarray(im.resize((im.width * 2, im.height * 2), Image.BICUBIC))


def garment_center(keypoints, width, confidence_floor=0.1):
    """Confidence-weighted mean x of confident keypoints, or ``None`` if there are none."""
    pts = [p for p in KeypointSet(keypoints) if p.confidence > confidence_floor]
    if not pts:
        return None
    w = np.array([p.confidence for p in pts])
    x = np.array([p.x for p in pts])
    return float((w * x).sum() / w.sum())


def calibrate(image, keypoints, sr=None, pad_fraction=0.5, blur_sigma=0.02, confidence_floor=0.1):
    """Re-centre a clothing image horizontally on its garment.

    The image is upscaled, mirror-padded on both sides by ``pad_fraction`` of
    its width, the padded bands (only) are blurred with a Gaussian of
    ``blur_sigma`` times the width, and a window of the upscaled width is cut
    around the garment centre. Keypoints are in input-image pixels.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    h0, w0 = img.shape[:2]
    KeypointSet(keypoints, w0, h0)
    up = np.asarray((sr or bicubic_x2)(img))
    h, w = up.shape[:2]
    scale = w / w0
    if abs(h / h0 - scale) > 1e-9:
        raise ValueError(f"upscaler changed the aspect ratio: {img.shape} -> {up.shape}")

    center = garment_center(keypoints, w0, confidence_floor)
    fallback = center is None
    if fallback:
        center = (w0 - 1) / 2

    pad = int(round(pad_fraction * w))
    padded = np.pad(up, ((0, 0), (pad, pad), (0, 0)), mode="symmetric").astype(np.float64)
    if blur_sigma > 0 and pad > 0:
        blurred = gaussian_filter(padded, sigma=(blur_sigma * w, blur_sigma * w, 0), mode="nearest")
        padded[:, :pad] = blurred[:, :pad]
        padded[:, pad + w:] = blurred[:, pad + w:]
    # pixel centres: x_up = (x_in + 0.5) * scale - 0.5
    c_up = (center + 0.5) * scale - 0.5
    start = int(np.floor(c_up + pad - (w - 1) / 2 + 0.5))
    start = min(max(start, 0), padded.shape[1] - w)
    out = np.clip(np.round(padded[:, start:start + w]), 0, 255).astype(up.dtype)
    return Calibration(out, center, fallback, scale)


# --------------------------------------------------------------------------- #
# split
# --------------------------------------------------------------------------- #

def split_groups(weights, ratio=DEFAULT_SPLIT_RATIO, seed=0):
    """Assign whole groups to train/test so the train share of total weight is near ``ratio``.

    ``weights`` maps group id -> number of usable records. Groups are visited
    in a seeded order and go to test until the test weight reaches its target.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    keys = sorted(weights)
    total = sum(weights[k] for k in keys)
    target = round((1.0 - ratio) * total)
    order = sub_rng(seed, "split").permutation(len(keys))
    out, test_w = {}, 0
    for i in order:
        k = keys[i]
        if test_w < target and test_w + weights[k] <= target + weights[k] / 2:
            out[k] = "test"
            test_w += weights[k]
        else:
            out[k] = "train"
    return out


def split_dataset(manifest, ratio=DEFAULT_SPLIT_RATIO, seed=0):
    """Write ``split`` on every grouped record; members of a group always share a split.

    Only records that finished dedup (duplicates included) take part; group
    weights count the non-duplicate members.
    """
    weights = {}
    for r in manifest:
        if r.group is None or not (r.reached("deduped") or r.status == "duplicate"):
            continue
        weights.setdefault(r.group, 0)
        if r.status != "duplicate":
            weights[r.group] += 1
    assignment = split_groups(weights, ratio, seed)
    changed = []
    for r in manifest:
        s = assignment.get(r.group) if r.group is not None else None
        if s is not None and r.split != s:
            r.split = s
            changed.append(r.id)
    return assignment, changed
