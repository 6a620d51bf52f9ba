"""Optimization loop: Adam with linear decay, progressive stages, augmentation,
alternating discriminator/generator updates and checkpoints."""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torchvision.transforms.functional as TF
import yaml

from ._validation import sub_rng
from .discriminators import MultiScaleDomainDiscriminator, RealFakeDiscriminator
from .generator import UNetGenerator
from .losses import (
    DEFAULT_LAYER_WEIGHTS,
    LossWeights,
    PairBatch,
    ladder_flags,
    sample_unassociated,
    total_losses,
)
from .progressive import ProgressiveState, resize_batch, stage_count

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cosplaygan-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.99
    epochs_constant: int = 70
    epochs_decay: int = 30
    batch_sizes: tuple = (8, 8, 8, 4)
    min_resolution: int = 32
    max_resolution: int = 256
    ngf: int = 64
    ndf: int = 64
    max_channels: int = 512
    fade_fraction: float = 0.5
    augment: bool = True
    rotation_degrees: float = 3.0
    crop_fraction: float = 0.9
    hue_jitter: float = 0.05
    saturation_jitter: float = 0.05
    flip_prob: float = 0.5
    lambda_l1: float = 10.0
    layer_weights: tuple = DEFAULT_LAYER_WEIGHTS
    ladder: str = "full"
    flags: dict = field(default_factory=dict)
    seed: int = 0
    max_steps: int = None
    checkpoint_every: int = 10

    def __post_init__(self):
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        self.flags = dict(self.flags or {})
        unknown = set(self.flags) - {f.name for f in dataclasses.fields(ladder_flags("full"))}
        if unknown:
            raise ValueError(f"unknown term flags: {sorted(unknown)}")
        if self.epochs_constant < 0 or self.epochs_decay < 0 or self.total_epochs < 1:
            raise ValueError("epoch counts must be non-negative with a positive total")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        ladder_flags(self.ladder)

    @property
    def total_epochs(self):
        return self.epochs_constant + self.epochs_decay

    @property
    def n_stages(self):
        return stage_count(self.min_resolution, self.max_resolution)

    def term_flags(self):
        return dataclasses.replace(ladder_flags(self.ladder), **self.flags)

    def loss_weights(self):
        return LossWeights(self.lambda_l1, self.layer_weights, self.term_flags())

    def batch_size(self, stage):
        return self.batch_sizes[min(stage, len(self.batch_sizes) - 1)]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["batch_sizes"] = list(self.batch_sizes)
        d["layer_weights"] = list(self.layer_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def lr_at(epoch, cfg):
    """Learning rate for 1-based ``epoch``: constant, then linear to zero."""
    total = cfg.total_epochs
    if not 1 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside 1..{total}")
    if epoch <= cfg.epochs_constant:
        return cfg.lr
    return cfg.lr * (total - epoch) / cfg.epochs_decay


def progressive_schedule(epoch, cfg):
    """Stage and fade coefficient at (possibly fractional, 0-based) ``epoch``.

    Stages split the epoch budget evenly; ``fade_alpha`` ramps linearly from 0
    over the first ``fade_fraction`` of every stage after the first. Without the
    progressive flag the model trains at full resolution from the start.
    """
    n = cfg.n_stages
    if not cfg.term_flags().progressive:
        return ProgressiveState(n - 1, 1.0, cfg.min_resolution)
    stage_len = cfg.total_epochs / n
    stage = min(int(epoch // stage_len), n - 1)
    if stage == 0:
        return ProgressiveState(0, 1.0, cfg.min_resolution)
    into = epoch - stage * stage_len
    ramp = cfg.fade_fraction * stage_len
    alpha = 1.0 if ramp <= 0 else min(1.0, max(0.0, into / ramp))
    return ProgressiveState(stage, alpha, cfg.min_resolution)


# --------------------------------------------------------------------------- #
# data
# --------------------------------------------------------------------------- #

@dataclass
class ImagePair:
    """One aligned sample: ``anime``/``clothing`` are ``(3, H, W)`` tensors in [-1, 1]."""

    anime: torch.Tensor
    clothing: torch.Tensor
    id: str = ""
    meta: dict = field(default_factory=dict)


def augment(pair, rng, cfg):
    """Randomly perturb one pair.

    Anime side: rotation in ``[-rotation_degrees, +rotation_degrees]``, a crop of
    ``crop_fraction`` of the side resized back, hue shift and saturation scale
    within the jitter bounds. Clothing side: horizontal flip with
    ``flip_prob``. Draws happen in a fixed order whether or not an operation is
    enabled, so the stream position never depends on the config.
    """
    x = (pair.anime + 1) / 2
    side = x.shape[-1]
    angle = rng.uniform(-1, 1) * cfg.rotation_degrees
    crop = max(1, int(round(cfg.crop_fraction * side)))
    # float draws: integers() over a one-value range would not advance the stream
    top = min(int(rng.random() * (side - crop + 1)), side - crop)
    left = min(int(rng.random() * (side - crop + 1)), side - crop)
    hue = rng.uniform(-1, 1) * cfg.hue_jitter
    sat = 1.0 + rng.uniform(-1, 1) * cfg.saturation_jitter
    flip = rng.random() < cfg.flip_prob

    if cfg.rotation_degrees:
        border = torch.cat([x[:, 0], x[:, -1], x[:, :, 0], x[:, :, -1]], dim=1).mean(dim=1)
        x = TF.rotate(x, float(angle), interpolation=TF.InterpolationMode.BILINEAR,
                      fill=[float(c) for c in border])
    if crop < side:
        x = TF.resized_crop(x, top, left, crop, crop, [side, side],
                            interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
    if cfg.hue_jitter:
        x = TF.adjust_hue(x.clamp(0, 1), float(hue))
    if cfg.saturation_jitter:
        x = TF.adjust_saturation(x.clamp(0, 1), float(sat))
    touched = cfg.rotation_degrees or crop < side or cfg.hue_jitter or cfg.saturation_jitter
    anime = x.clamp(0, 1) * 2 - 1 if touched else pair.anime
    clothing = torch.flip(pair.clothing, dims=[-1]) if flip else pair.clothing
    return ImagePair(anime, clothing, pair.id, dict(pair.meta, flipped=bool(flip)))


class PairedDataset:
    """In-memory paired corpus at a fixed side length."""

    def __init__(self, x, y, ids=None):
        if x.shape != y.shape or x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected matching (N, 3, H, W) tensors, got {tuple(x.shape)} / {tuple(y.shape)}")
        self.x = x.float()
        self.y = y.float()
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(x))]

    def __len__(self):
        return len(self.x)

    @property
    def resolution(self):
        return self.x.shape[-1]

    def pair(self, i):
        return ImagePair(self.x[i], self.y[i], self.ids[i])

    def batch(self, indices, state, cfg=None, epoch=0):
        xs, ys = [], []
        for i in indices:
            p = self.pair(int(i))
            if cfg is not None and cfg.augment:
                p = augment(p, sub_rng(cfg.seed, "augment", epoch, int(i)), cfg)
            xs.append(p.anime)
            ys.append(p.clothing)
        x = resize_batch(torch.stack(xs), state.resolution)
        y = resize_batch(torch.stack(ys), state.resolution)
        return PairBatch.from_pairs(x, y)

    def ids_hash(self):
        return hashlib.sha256("\n".join(self.ids).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- #
# trainer
# --------------------------------------------------------------------------- #

def param_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _rebuild_optimizer(old, module, cfg):
    new = torch.optim.Adam(module.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    if old is not None:
        for group in new.param_groups:
            group["lr"] = old.param_groups[0]["lr"]
        for p, st in old.state.items():
            new.state[p] = st
    return new


class Trainer:
    """Owns the generator, both discriminators, their optimizers and the step counter.

    All randomness is derived from ``cfg.seed`` through named streams
    (initialisation, data order, augmentation per ``(epoch, sample)``,
    unassociated sampling per step), so a run is reproducible and resumable.
    """

    def __init__(self, cfg, dataset=None, run_dir=None, dtype=torch.float32):
        self.cfg = cfg
        self.dataset = dataset
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.weights = cfg.loss_weights()
        flags = self.weights.flags
        arch = dict(min_resolution=cfg.min_resolution, max_resolution=cfg.max_resolution)
        self.generator = UNetGenerator(cfg.ngf, cfg.max_channels, seed=self._seed("init-g"), **arch)
        self.domain_disc = MultiScaleDomainDiscriminator(
            cfg.ndf, cfg.max_channels, n_scales=3, spectral_norm=flags.spectral_norm,
            seed=self._seed("init-dd"), **arch)
        self.realfake_disc = RealFakeDiscriminator(
            cfg.ndf, cfg.max_channels, spectral_norm=flags.spectral_norm,
            seed=self._seed("init-dr"), **arch)
        for m in self.modules:
            m.to(dtype)
        self.opt_g = self.opt_dd = self.opt_dr = None
        self._rebuild_optimizers()
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.history = []
        if not flags.progressive:
            while self.generator.n_stages < cfg.n_stages:
                self._grow()

    def _seed(self, name):
        return int(sub_rng(self.cfg.seed, name).integers(2 ** 62))

    @property
    def modules(self):
        return [self.generator, self.domain_disc, self.realfake_disc]

    def _rebuild_optimizers(self):
        self.opt_g = _rebuild_optimizer(self.opt_g, self.generator, self.cfg)
        self.opt_dd = _rebuild_optimizer(self.opt_dd, self.domain_disc, self.cfg)
        self.opt_dr = _rebuild_optimizer(self.opt_dr, self.realfake_disc, self.cfg)

    def _grow(self):
        for m in self.modules:
            m.grow()
        sn = self.weights.flags.spectral_norm
        self.domain_disc.set_spectral_norm(sn)
        self.realfake_disc.set_spectral_norm(sn)
        self._rebuild_optimizers()

    def ensure_stage(self, state):
        while self.generator.n_stages <= state.stage:
            self._grow()

    def set_lr(self, lr):
        for opt in (self.opt_g, self.opt_dd, self.opt_dr):
            for group in opt.param_groups:
                group["lr"] = lr

    def _sn_buffers(self):
        return {n: b.clone() for m in (self.domain_disc, self.realfake_disc)
                for n, b in m.named_buffers(prefix=type(m).__name__)}

    def _restore_sn(self, saved):
        for m in (self.domain_disc, self.realfake_disc):
            for n, b in m.named_buffers(prefix=type(m).__name__):
                b.copy_(saved[n])

    def train_step(self, batch, state, track_hashes=False):
        """One domain-discriminator, one real/fake-discriminator and one generator update.

        All three gradients are taken from a single evaluation of the objective
        at the pre-step parameters, so each network is updated against a frozen
        copy of the others. Returns the flat loss record.

        Raises:
            NonFiniteLossError: if any objective is NaN/inf; nothing is updated.
        """
        self.ensure_stage(state)
        flags = self.weights.flags
        hashes = {}
        if track_hashes:
            hashes["pre"] = {type(m).__name__: param_hash(m) for m in self.modules}
        saved_sn = self._sn_buffers()
        if flags.spectral_norm:
            self.domain_disc.power_iterate()
            self.realfake_disc.power_iterate()

        dtype = next(self.generator.parameters()).dtype
        x, y = batch.x.to(dtype), batch.y.to(dtype)
        y_un = None
        if flags.domain_adv and flags.unassociated:
            if len(batch) >= 2:
                y_un = sample_unassociated(batch, sub_rng(self.cfg.seed, "unassociated", self.step)).y
                y_un = y_un.to(dtype)
            else:
                logger.debug("batch of one: no unassociated pairs this step")

        fake = self.generator(x, state)
        rf = self.realfake_disc if flags.uses_realfake_disc else None
        g_loss, dd_loss, dr_loss, record = total_losses(
            x, y, fake, self.domain_disc, rf, state, self.weights, y_unassoc=y_un)
        for name, v in (("generator", g_loss), ("domain", dd_loss), ("realfake", dr_loss)):
            if not torch.isfinite(v):
                self._restore_sn(saved_sn)
                raise NonFiniteLossError(f"{name} loss is {float(v.detach())} at step {self.step}")

        g_params = list(self.generator.parameters())
        g_grads = torch.autograd.grad(g_loss, g_params, retain_graph=True, allow_unused=True)
        if track_hashes:
            hashes["at_g_grad"] = {type(m).__name__: param_hash(m) for m in self.modules}
        d_params = list(self.domain_disc.parameters()) + list(self.realfake_disc.parameters())
        d_loss = dd_loss + dr_loss
        if d_loss.requires_grad:
            d_grads = torch.autograd.grad(d_loss, d_params, allow_unused=True)
        else:
            d_grads = [None] * len(d_params)
        if track_hashes:
            hashes["at_d_grad"] = {type(m).__name__: param_hash(m) for m in self.modules}

        # unused layers (faded-out or not yet blended in) keep grad None so Adam skips them
        for p, gr in zip(d_params, d_grads):
            p.grad = gr
        for p, gr in zip(g_params, g_grads):
            p.grad = gr
        if flags.domain_adv:
            self.opt_dd.step()
        if flags.realfake:
            self.opt_dr.step()
        self.opt_g.step()
        for opt in (self.opt_dd, self.opt_dr, self.opt_g):
            opt.zero_grad(set_to_none=True)

        flat = record.flat()
        if track_hashes:
            hashes["post"] = {type(m).__name__: param_hash(m) for m in self.modules}
            flat["hashes"] = hashes
        return flat

    def _epoch_plan(self, epoch):
        state0 = progressive_schedule(epoch, self.cfg)
        bs = min(self.cfg.batch_size(state0.stage), len(self.dataset))
        order = sub_rng(self.cfg.seed, "order", epoch).permutation(len(self.dataset))
        return order, bs, len(self.dataset) // bs

    def fit(self, max_steps=None, callback=None):
        """Train until the epoch budget or ``max_steps`` (total, including resumed steps) is reached.

        ``callback(trainer, record)`` runs after every step.
        """
        if self.dataset is None:
            raise ValueError("Trainer has no dataset")
        max_steps = max_steps if max_steps is not None else self.cfg.max_steps
        cfg = self.cfg
        while self.epoch < cfg.total_epochs:
            if max_steps is not None and self.step >= max_steps:
                break
            order, bs, n_batches = self._epoch_plan(self.epoch)
            self.set_lr(lr_at(self.epoch + 1, cfg))
            while self.batch_index < n_batches:
                if max_steps is not None and self.step >= max_steps:
                    return self
                b = self.batch_index
                state = progressive_schedule(self.epoch + b / n_batches, cfg)
                self.ensure_stage(state)
                batch = self.dataset.batch(order[b * bs:(b + 1) * bs], state, cfg, self.epoch)
                self.batch_index += 1
                try:
                    rec = self.train_step(batch, state)
                except NonFiniteLossError as err:
                    logger.warning("step aborted: %s", err)
                    continue
                self.step += 1
                rec.update(step=self.step, epoch=self.epoch, stage=state.stage,
                           fade_alpha=state.fade_alpha, lr=self.opt_g.param_groups[0]["lr"])
                self.history.append(rec)
                self._log(rec)
                if callback is not None:
                    callback(self, rec)
            self.epoch += 1
            self.batch_index = 0
            if self.run_dir is not None and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save_checkpoint(self.run_dir / f"checkpoint_e{self.epoch:03d}.pt")
        return self

    def _log(self, rec):
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @property
    def state(self):
        """State at the current position of the schedule (the top grown stage once finished)."""
        if self.epoch >= self.cfg.total_epochs:
            return ProgressiveState(self.generator.n_stages - 1, 1.0, self.cfg.min_resolution)
        _, _, n_batches = self._epoch_plan(self.epoch) if self.dataset is not None else (None, None, 1)
        st = progressive_schedule(self.epoch + self.batch_index / max(n_batches, 1), self.cfg)
        if st.stage >= self.generator.n_stages:
            return ProgressiveState(self.generator.n_stages - 1, 1.0, self.cfg.min_resolution)
        return st

    # ------------------------------------------------------------------ #
    # checkpoints
    # ------------------------------------------------------------------ #

    def save_checkpoint(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        st = self.state
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "n_stages": self.generator.n_stages,
            "generator": self.generator.state_dict(),
            "domain": self.domain_disc.state_dict(),
            "realfake": self.realfake_disc.state_dict(),
            "optim": {"g": self.opt_g.state_dict(), "dd": self.opt_dd.state_dict(),
                      "dr": self.opt_dr.state_dict()},
            "progress": {"step": self.step, "epoch": self.epoch, "batch_index": self.batch_index},
            "state": {"stage": st.stage, "fade_alpha": st.fade_alpha,
                      "min_resolution": st.min_resolution},
            "seeds": {"root": self.cfg.seed},
            "dtype": str(next(self.generator.parameters()).dtype),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)
        if self.run_dir is not None:
            RunManifest.open(self.run_dir, self.cfg, self.dataset).add_checkpoint(path)
        return path

    @classmethod
    def load_checkpoint(cls, path, dataset=None, run_dir=None):
        payload = read_checkpoint(path)
        cfg = TrainConfig.from_dict(payload["config"])
        dtype = getattr(torch, payload.get("dtype", "torch.float32").replace("torch.", ""))
        trainer = cls(cfg, dataset, run_dir, dtype=dtype)
        while trainer.generator.n_stages < payload["n_stages"]:
            trainer._grow()
        trainer.generator.load_state_dict(payload["generator"])
        trainer.domain_disc.load_state_dict(payload["domain"])
        trainer.realfake_disc.load_state_dict(payload["realfake"])
        trainer.opt_g.load_state_dict(payload["optim"]["g"])
        trainer.opt_dd.load_state_dict(payload["optim"]["dd"])
        trainer.opt_dr.load_state_dict(payload["optim"]["dr"])
        prog = payload["progress"]
        trainer.step, trainer.epoch, trainer.batch_index = prog["step"], prog["epoch"], prog["batch_index"]
        return trainer


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as err:
        raise CheckpointError(f"corrupt checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}")
    return payload


def load_generator(path, stage=None):
    """Generator and its fully faded-in state from a checkpoint (optionally a lower stage)."""
    payload = read_checkpoint(path)
    cfg = TrainConfig.from_dict(payload["config"])
    g = UNetGenerator(cfg.ngf, cfg.max_channels, cfg.min_resolution, cfg.max_resolution)
    while g.n_stages < payload["n_stages"]:
        g.grow()
    g.load_state_dict(payload["generator"])
    top = payload["n_stages"] - 1
    if stage is None:
        stage = top
    if not 0 <= stage <= top:
        raise ValueError(f"checkpoint has stages 0..{top}, asked for {stage}")
    g.eval()
    return g, ProgressiveState(stage, 1.0, cfg.min_resolution), cfg


class RunManifest:
    """Append-only record of a run: config hash, dataset identity, checkpoints."""

    FILENAME = "run_manifest.json"

    def __init__(self, path, data):
        self.path = Path(path)
        self.data = data

    @classmethod
    def open(cls, run_dir, cfg, dataset=None):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / cls.FILENAME
        if path.exists():
            data = json.loads(path.read_text())
            if data["config_hash"] != cfg.hash():
                raise ValueError(
                    f"run dir {run_dir} belongs to config {data['config_hash']}, not {cfg.hash()}")
            return cls(path, data)
        data = {
            "config_hash": cfg.hash(),
            "dataset": {"ids_hash": dataset.ids_hash() if dataset is not None else None,
                        "n_pairs": len(dataset) if dataset is not None else 0},
            "metrics_log": "metrics.jsonl",
            "checkpoints": [],
            "evaluations": [],
        }
        m = cls(path, data)
        m.write()
        return m

    def write(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    def add_checkpoint(self, path):
        self.data["checkpoints"].append(str(Path(path).name))
        self.write()

    def add_evaluation(self, path):
        self.data["evaluations"].append(str(Path(path).name))
        self.write()


__all__ = [
    "CheckpointError",
    "ImagePair",
    "NonFiniteLossError",
    "PairedDataset",
    "RunManifest",
    "TrainConfig",
    "Trainer",
    "augment",
    "load_generator",
    "lr_at",
    "param_hash",
    "progressive_schedule",
    "read_checkpoint",
]
