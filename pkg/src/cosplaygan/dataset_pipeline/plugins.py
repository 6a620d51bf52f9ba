"""Bindings for the external models the pipeline consults.

Every model is called with an image path (the upscaler also gets an output
path) and answers with a small JSON-style dict:

* classifier: ``{"score": p}`` with ``p`` in [0, 1]
* detector: ``{"boxes": [{"label", "left", "top", "width", "height", "confidence"}, ...]}``
* keypoints: ``{"keypoints": [{"name", "x", "y", "confidence"}, ...]}``
* upscaler: ``{"path": written_file}``

A binding is either a Python callable, a builtin name (``"builtin:bicubic"``)
or a command list run as a subprocess whose stdout is that JSON document.
"""

import json
import shutil
import subprocess

import numpy as np
from PIL import Image

ROLES = ("classifier", "detector", "keypoints", "upscaler")


class PluginError(RuntimeError):
    pass


def load_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_png(array, path):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")
    return path


# --------------------------------------------------------------------------- #
# builtins
# --------------------------------------------------------------------------- #

def constant_classifier(value=1.0):
    def score(path):
        return {"score": float(value)}
    return score


def half_split_detector(path):
    """Character on the left half, clothing on the right, as in side-by-side listings."""
    h, w = load_rgb(path).shape[:2]
    half = w // 2
    return {"boxes": [
        {"label": "character", "left": 0, "top": 0, "width": half, "height": h, "confidence": 0.5},
        {"label": "clothing", "left": half, "top": 0, "width": w - half, "height": h,
         "confidence": 0.5},
    ]}


def full_image_detector(path):
    h, w = load_rgb(path).shape[:2]
    return {"boxes": [
        {"label": label, "left": 0, "top": 0, "width": w, "height": h, "confidence": 0.5}
        for label in ("character", "clothing")]}


def grid_keypoints(path, n=3):
    """``n x n`` evenly spaced points, all at confidence 0.5 (centres the image)."""
    h, w = load_rgb(path).shape[:2]
    xs = np.linspace(0, w - 1, n + 2)[1:-1]
    ys = np.linspace(0, h - 1, n + 2)[1:-1]
    return {"keypoints": [{"name": f"grid{i}_{j}", "x": float(x), "y": float(y), "confidence": 0.5}
                          for i, y in enumerate(ys) for j, x in enumerate(xs)]}


def foreground_keypoints(path, tolerance=6):
    """One point per image row: the centroid of pixels that differ from the border colour."""
    img = load_rgb(path).astype(np.int16)
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    fg = np.abs(img - bg).max(axis=-1) > tolerance
    cols = np.arange(img.shape[1])
    points = []
    for y, row in enumerate(fg):
        if row.any():
            points.append({"name": f"row{y}", "x": float((cols * row).sum() / row.sum()),
                           "y": float(y), "confidence": 1.0})
    return {"keypoints": points}


def bicubic_upscaler(path, out_path, factor=2):
    with Image.open(path) as im:
        im = im.convert("RGB")
        im.resize((im.width * factor, im.height * factor), Image.BICUBIC).save(out_path, "PNG")
    return {"path": str(out_path)}


def identity_upscaler(path, out_path):
    shutil.copyfile(path, out_path)
    return {"path": str(out_path)}


BUILTINS = {
    "classifier": {"constant": constant_classifier(1.0)},
    "detector": {"half-split": half_split_detector, "full-image": full_image_detector},
    "keypoints": {"grid": grid_keypoints, "foreground": foreground_keypoints},
    "upscaler": {"bicubic": bicubic_upscaler, "identity": identity_upscaler},
}

DEFAULT_BINDINGS = {
    "classifier": "builtin:constant",
    "detector": "builtin:half-split",
    "keypoints": "builtin:foreground",
    "upscaler": "builtin:bicubic",
}


class SubprocessPlugin:
    """Runs ``command + [paths...]`` and parses stdout as JSON."""

    def __init__(self, command, timeout=300):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, *paths):
        try:
            done = subprocess.run(self.command + [str(p) for p in paths], capture_output=True,
                                  text=True, timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as err:
            raise PluginError(f"{self.command[0]}: {err}") from err
        if done.returncode != 0:
            raise PluginError(f"{self.command[0]} exited {done.returncode}: {done.stderr.strip()[:200]}")
        try:
            return json.loads(done.stdout)
        except json.JSONDecodeError as err:
            raise PluginError(f"{self.command[0]} printed invalid JSON: {err}") from err

    def __repr__(self):
        return f"SubprocessPlugin({self.command!r})"


def resolve(role, binding):
    """Turn a binding into a callable, or return ``None`` when it cannot be used."""
    if role not in ROLES:
        raise ValueError(f"unknown model role {role!r}")
    if binding is None:
        return None
    if callable(binding):
        return binding
    if isinstance(binding, str):
        if binding.startswith("builtin:"):
            return BUILTINS[role].get(binding.split(":", 1)[1])
        binding = binding.split()
    if isinstance(binding, (list, tuple)) and binding:
        if shutil.which(str(binding[0])) is None:
            return None
        return SubprocessPlugin(binding)
    return None


def parse_score(doc):
    s = float(doc["score"] if isinstance(doc, dict) else doc)
    if not 0.0 <= s <= 1.0:
        raise PluginError(f"classifier score {s} outside [0, 1]")
    return s
