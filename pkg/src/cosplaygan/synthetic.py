"""Procedural stand-ins for the web corpus: character->garment pairs and
side-by-side listing images with planted duplicates."""

import numpy as np
import torch
from PIL import Image

GARMENT_KINDS = ("shirt", "dress", "coat")


def _grid(side):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    return yy / side, xx / side


def _garment_mask(kind, yy, xx, cx, cy, scale):
    """Boolean mask of a garment silhouette centred on ``(cx, cy)`` (unit coords)."""
    dx = (xx - cx) / scale
    dy = (yy - cy) / scale
    torso = (np.abs(dx) < 0.18) & (dy > -0.25) & (dy < 0.25)
    if kind == "shirt":
        sleeves = (np.abs(dx) < 0.32) & (dy > -0.25) & (dy < -0.08)
        return torso | sleeves
    if kind == "dress":
        skirt = (dy >= 0.0) & (dy < 0.38) & (np.abs(dx) < 0.12 + 0.5 * dy)
        return torso & (dy < 0.05) | skirt
    coat = (np.abs(dx) < 0.22) & (dy > -0.25) & (dy < 0.36)
    sleeves = (np.abs(dx) < 0.3) & (dy > -0.25) & (dy < 0.2) & (np.abs(dx) > 0.22)
    return coat | sleeves


def _accent_mask(kind, yy, xx, cx, cy, scale):
    dx = (xx - cx) / scale
    dy = (yy - cy) / scale
    if kind == "shirt":
        return (np.abs(dy - 0.05) < 0.04) & (np.abs(dx) < 0.18)
    if kind == "dress":
        return (np.abs(dy - 0.02) < 0.03) & (np.abs(dx) < 0.14)
    return (np.abs(dx) < 0.03) & (dy > -0.25) & (dy < 0.36)


def render_character(kind, body, accent, background, side, cx=0.5):
    yy, xx = _grid(side)
    img = np.empty((side, side, 3))
    img[:] = background
    img[_garment_mask(kind, yy, xx, cx, 0.62, 0.85)] = body
    img[_accent_mask(kind, yy, xx, cx, 0.62, 0.85)] = accent
    head = ((xx - cx) ** 2 + (yy - 0.22) ** 2) < 0.11 ** 2
    img[head] = (0.98, 0.85, 0.75)
    hair = head & (yy < 0.2)
    img[hair] = accent * 0.6
    return img


def render_garment(kind, body, accent, side, cx=0.5, background=(1.0, 1.0, 1.0), scale=1.6):
    yy, xx = _grid(side)
    img = np.empty((side, side, 3))
    img[:] = background
    img[_garment_mask(kind, yy, xx, cx, 0.5, scale)] = body
    img[_accent_mask(kind, yy, xx, cx, 0.5, scale)] = accent
    return img


def _palette(rng):
    body = rng.uniform(0.05, 0.95, 3)
    accent = 1.0 - body * rng.uniform(0.6, 1.0)
    background = rng.uniform(0.55, 1.0, 3)
    return body, accent, background


def make_costume_pairs(n, resolution=64, seed=0):
    """``n`` (character, garment) pairs as ``(N, 3, R, R)`` tensors in [-1, 1].

    The garment keeps the character's outfit type and colours, drawn large on a
    white background, so the mapping is learnable but not pixel-aligned.
    """
    rng = np.random.default_rng(seed)
    xs = np.empty((n, resolution, resolution, 3))
    ys = np.empty_like(xs)
    kinds = []
    for i in range(n):
        kind = GARMENT_KINDS[rng.integers(len(GARMENT_KINDS))]
        body, accent, background = _palette(rng)
        xs[i] = render_character(kind, body, accent, background, resolution)
        ys[i] = render_garment(kind, body, accent, resolution)
        kinds.append(kind)
    to_t = lambda a: torch.from_numpy(a.transpose(0, 3, 1, 2) * 2 - 1).float()
    return to_t(xs), to_t(ys), kinds


def _to_uint8(img):
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_listing_fixture(directory, n_unique=10, n_duplicates=2, side=64, seed=0):
    """Write side-by-side listing images (character left, garment right).

    Garments are planted off-centre in the right half; the last ``n_duplicates``
    files are byte copies of the first ones under new names.

    Returns:
        dict mapping file stem -> planted garment centre x (pixels, within the
        clothing half), plus ``"_duplicates"`` -> list of (copy, original) stems.
    """
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    planted = {}
    originals = []
    for i in range(n_unique):
        kind = GARMENT_KINDS[i % len(GARMENT_KINDS)]
        body, accent, background = _palette(rng)
        offset = int(rng.integers(-side // 6, side // 6 + 1))
        cx = side // 2 + offset
        left = render_character(kind, body, accent, background, side)
        # smaller garment so the offset silhouette stays inside the frame
        right = render_garment(kind, body, accent, side, cx=cx / side, scale=1.0)
        listing = np.concatenate([left, right], axis=1)
        stem = f"listing_{i:02d}"
        Image.fromarray(_to_uint8(listing)).save(directory / f"{stem}.png")
        planted[stem] = _planted_centre(right)
        originals.append(stem)
    dups = []
    for j in range(n_duplicates):
        src = originals[j]
        stem = f"zz_copy_{j:02d}"
        (directory / f"{stem}.png").write_bytes((directory / f"{src}.png").read_bytes())
        planted[stem] = planted[src]
        dups.append((stem, src))
    planted["_duplicates"] = dups
    return planted


def _planted_centre(garment):
    """Row-averaged centre of the non-white pixels (the symmetric silhouette's axis)."""
    fg = np.any(garment < 0.98, axis=-1)
    cols = np.arange(garment.shape[1])
    rows = [float((cols * r).sum() / r.sum()) for r in fg if r.any()]
    return float(np.mean(rows))
