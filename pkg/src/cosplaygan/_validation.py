"""Input validation helpers shared by the models, estimator and metrics."""

import hashlib
import numbers

import numpy as np
import torch


def is_power_of_two(n):
    return isinstance(n, numbers.Integral) and n > 0 and (n & (n - 1)) == 0


def to_unit_range(images):
    """Map uint8 images in [0, 255] to floats in [-1, 1]; floats pass through."""
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 127.5 - 1.0
    return arr.astype(np.float32, copy=False)


def to_uint8(images):
    """Inverse of :func:`to_unit_range`, clipping to the valid range."""
    arr = np.asarray(images, dtype=np.float64)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def check_image_batch(X, *, name="X", resolution=None, require_square=True,
                      bounds=(-1.0, 1.0), dtype=torch.float32):
    """Validate images and return an ``(N, 3, H, W)`` tensor.

    Accepts numpy arrays shaped ``(H, W, 3)`` or ``(N, H, W, 3)`` (uint8 is
    rescaled to [-1, 1]) and tensors shaped ``(3, H, W)`` or ``(N, 3, H, W)``.

    Raises:
        ValueError: on wrong rank/channels, non-finite values, values outside
            ``bounds``, a non-square or non power-of-two side, or a side that
            differs from ``resolution``.
    """
    if isinstance(X, torch.Tensor):
        t = X
        if t.ndim == 3:
            t = t.unsqueeze(0)
        if t.ndim != 4 or t.shape[1] != 3:
            raise ValueError(f"{name}: expected (N, 3, H, W) tensor, got {tuple(X.shape)}")
        t = t.to(dtype)
    else:
        arr = to_unit_range(X)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"{name}: expected (N, H, W, 3) array, got {np.shape(X)}")
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)

    if t.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name}: contains non-finite values")
    if bounds is not None:
        lo, hi = bounds
        if t.min() < lo - 1e-6 or t.max() > hi + 1e-6:
            raise ValueError(f"{name}: values outside [{lo}, {hi}]")
    h, w = t.shape[-2:]
    if require_square:
        if h != w:
            raise ValueError(f"{name}: images must be square, got {h}x{w}")
        if not is_power_of_two(h):
            raise ValueError(f"{name}: side {h} is not a power of two")
    if resolution is not None and h != resolution:
        raise ValueError(f"{name}: resolution {h} does not match expected {resolution}")
    return t


def tensor_to_hwc(t):
    """``(N, 3, H, W)`` tensor -> ``(N, H, W, 3)`` float numpy array."""
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def check_random_seed(seed):
    if seed is None:
        return 0
    if not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def sub_rng(seed, *keys):
    """Named, order-independent numpy RNG stream derived from a root seed.

    ``keys`` may mix ints and strings; strings are hashed stably so that the
    stream for ``("augment", epoch, idx)`` never depends on draw order.
    """
    entropy = [check_random_seed(seed)]
    for k in keys:
        if isinstance(k, str):
            entropy.append(int.from_bytes(hashlib.sha256(k.encode("utf-8")).digest()[:8], "little"))
        else:
            entropy.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(entropy))
