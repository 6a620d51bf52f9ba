import torch

from cosplaygan.progressive import ProgressiveState

TINY = dict(ngf=4, max_channels=16, min_resolution=16, max_resolution=32)


def rand_images(n, side, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, side, side, generator=gen, dtype=torch.float64) * 2 - 1).to(dtype)


def state(stage=0, alpha=1.0, min_resolution=16):
    return ProgressiveState(stage, alpha, min_resolution)


# one (number, title, passed, detail) entry per acceptance criterion, printed at session end
ACCEPTANCE = []
