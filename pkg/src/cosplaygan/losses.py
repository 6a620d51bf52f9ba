"""Loss terms of the full objective, the configuration ladder and unassociated-pair sampling."""

from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .discriminators import PatchScoreMaps

DEFAULT_LAYER_WEIGHTS = (5.0, 1.5, 1.5, 1.5, 1.0)


@dataclass(frozen=True)
class TermFlags:
    """Which parts of the objective (and which discriminator features) are active.

    The defaults are the full objective: every term except the real/fake feature
    matching loss, which the printed objective leaves out.
    """

    domain_adv: bool = True
    l1: bool = True
    progressive: bool = True
    calibrated: bool = True
    realfake: bool = True
    unassociated: bool = True
    spectral_norm: bool = True
    domain_multiscale: bool = True
    realfake_multiscale: bool = True
    fm_domain: bool = True
    fm_realfake: bool = False
    input_consistency: bool = True

    @property
    def uses_realfake_disc(self):
        return self.realfake or self.fm_realfake or self.input_consistency

    def enabled(self):
        return frozenset(f.name for f in fields(self) if getattr(self, f.name))


_BASELINE = TermFlags(progressive=False, calibrated=False, realfake=False, unassociated=False,
                      spectral_norm=False, domain_multiscale=False, realfake_multiscale=False,
                      fm_domain=False, fm_realfake=False, input_consistency=False)

# Table rows (a)..(j): each row switches on what it names, cumulatively.
_LADDER_STEPS = [
    ("a", "Baseline", {}),
    ("b", "+Coarse-to-fine scheme", {"progressive": True}),
    ("c", "+Calibrate dataset", {"calibrated": True}),
    ("d", "+Real/fake discriminator", {"realfake": True}),
    ("e", "+Unassociated pair", {"unassociated": True}),
    ("f", "+Spectral normalization", {"spectral_norm": True}),
    ("g", "+Multi-scale discriminator", {"domain_multiscale": True}),
    ("h", "+Multi-scale patch discriminator", {"realfake_multiscale": True}),
    ("i", "+Feature match", {"fm_domain": True, "fm_realfake": True}),
    ("j", "+Input consistency loss", {"input_consistency": True}),
]


def _build_ladder():
    rows = {}
    flags = _BASELINE
    for key, label, change in _LADDER_STEPS:
        flags = replace(flags, **change)
        rows[key] = (f"({key}) {label}", flags)
    return rows


LADDER = _build_ladder()
GROUND_TRUTH_LABEL = "(k) Ground truth"
MODIFIERS = ("progressive", "calibrated", "spectral_norm")


def ladder_flags(row):
    """Flags for a configuration row ``'a'``..``'j'`` (``'full'`` is the default objective)."""
    if row in (None, "full"):
        return TermFlags()
    try:
        return LADDER[row][1]
    except KeyError:
        raise ValueError(f"unknown ladder row {row!r}; expected one of {sorted(LADDER)} or 'full'")


def ladder_label(row):
    if row in (None, "full"):
        return "Full objective"
    return LADDER[row][0]


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 10.0
    layer_weights: tuple = DEFAULT_LAYER_WEIGHTS
    flags: TermFlags = field(default_factory=TermFlags)

    def __post_init__(self):
        object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))
        if self.lambda_l1 < 0 or any(w < 0 for w in self.layer_weights):
            raise ValueError("loss weights must be non-negative")


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def lsgan_term(scores, target):
    """Mean of ``(score - target)^2`` pooled over every element of every map."""
    maps = scores.scores if isinstance(scores, PatchScoreMaps) else scores
    maps = [_as_tensor(m) for m in maps]
    if not maps or sum(m.numel() for m in maps) == 0:
        raise ValueError("lsgan_term needs at least one non-empty score map")
    sq = torch.cat([(m.reshape(-1) - target) ** 2 for m in maps])
    return sq.mean()


def l1_term(y, y_hat):
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    return (y - y_hat).abs().mean()


def feature_matching_term(feats_real, feats_fake, w):
    """``sum_i N_i * mean|real_i - fake_i|``; the real side is treated as a constant target."""
    if len(feats_real) != len(feats_fake):
        raise ValueError(f"tap count mismatch: {len(feats_real)} vs {len(feats_fake)}")
    if len(feats_real) != len(w.layer_weights):
        raise ValueError(f"{len(feats_real)} taps but {len(w.layer_weights)} layer weights")
    total = 0.0
    for n_i, a, b in zip(w.layer_weights, feats_real, feats_fake):
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise ValueError(f"feature shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + n_i * (a.detach() - b).abs().mean()
    return _as_tensor(total)


def input_consistency_term(feats_input, feats_generated, w):
    """Feature matching between the real/fake discriminator's view of the anime
    input and of the generated clothing."""
    return feature_matching_term(feats_input, feats_generated, w)


# --------------------------------------------------------------------------- #
# unassociated pairs
# --------------------------------------------------------------------------- #

@dataclass
class PairBatch:
    """Aligned ``x``/``y`` tensors; ``y_source[i]`` is the batch index ``y[i]`` came from."""

    x: torch.Tensor
    y: torch.Tensor
    associated: np.ndarray
    y_source: np.ndarray

    @classmethod
    def from_pairs(cls, x, y):
        n = len(x)
        return cls(x, y, np.ones(n, dtype=bool), np.arange(n))

    def __len__(self):
        return len(self.x)


def random_derangement(n, rng):
    """Uniform permutation of ``range(n)`` without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def sample_unassociated(batch, rng):
    """Re-pair every ``x`` with another sample's real ``y``, labelled unassociated.

    ``batch`` is a :class:`PairBatch` or a list of ``(x, y)`` / ``(x, y, associated)``
    tuples; the result has the same form.
    """
    if isinstance(batch, PairBatch):
        perm = random_derangement(len(batch), rng)
        return PairBatch(batch.x, batch.y[perm], np.zeros(len(batch), dtype=bool),
                         batch.y_source[perm])
    pairs = list(batch)
    perm = random_derangement(len(pairs), rng)
    return [(pairs[i][0], pairs[j][1], False) for i, j in enumerate(perm)]


# --------------------------------------------------------------------------- #
# full objective
# --------------------------------------------------------------------------- #

@dataclass
class LossRecord:
    """Scalar values of every enabled term for one evaluation of the objective.

    ``generator``/``domain``/``realfake`` hold the weighted contributions that add
    up to the respective totals. ``per_scale`` keeps the per-scale adversarial
    values that were averaged, and ``l1`` is the unweighted reconstruction error.
    ``modifiers`` names the active switches that change training without adding
    a loss term (progressive growing, calibrated data, spectral normalization).
    """

    generator: dict = field(default_factory=dict)
    domain: dict = field(default_factory=dict)
    realfake: dict = field(default_factory=dict)
    per_scale: dict = field(default_factory=dict)
    l1: float = float("nan")
    modifiers: tuple = ()

    @property
    def generator_total(self):
        return float(sum(self.generator.values()))

    @property
    def domain_total(self):
        return float(sum(self.domain.values()))

    @property
    def realfake_total(self):
        return float(sum(self.realfake.values()))

    def flat(self):
        out = {}
        for prefix, terms in (("g", self.generator), ("dd", self.domain), ("dr", self.realfake)):
            for k, v in terms.items():
                out[f"{prefix}/{k}"] = v
        out["g/total"] = self.generator_total
        out["dd/total"] = self.domain_total
        out["dr/total"] = self.realfake_total
        for k, vals in self.per_scale.items():
            for i, v in enumerate(vals):
                out[f"scale/{k}/{i}"] = v
        out["l1"] = self.l1
        return out

    def schema(self):
        """Names of the loss terms present, e.g. ``{'g/l1', 'dd/unassoc', ...}``."""
        names = {f"g/{k}" for k in self.generator}
        names |= {f"dd/{k}" for k in self.domain}
        names |= {f"dr/{k}" for k in self.realfake}
        names |= {f"scale/{k}/{i}" for k, v in self.per_scale.items() for i in range(len(v))}
        names |= {f"mod/{m}" for m in self.modifiers}
        return frozenset(names)


def _scalar(t):
    return float(t.detach())


def _mean(terms):
    return torch.stack(terms).mean()


def total_losses(x, y, fake, domain_disc, realfake_disc, state, weights=None, y_unassoc=None):
    """Evaluate the generator and both discriminator objectives in one pass.

    Args:
        x, y: anime input and its ground-truth clothing, ``(N, 3, R, R)``.
        fake: ``G(x)`` at the same resolution, still attached to the generator graph.
        domain_disc: :class:`MultiScaleDomainDiscriminator`.
        realfake_disc: :class:`RealFakeDiscriminator` (may be ``None`` when no
            enabled term needs it).
        state: current :class:`ProgressiveState`.
        weights: :class:`LossWeights`; its ``flags`` gate every term.
        y_unassoc: real clothing re-paired with ``x`` (see :func:`sample_unassociated`).

    Returns:
        ``(generator_loss, domain_loss, realfake_loss, record)``. The two
        discriminator losses see ``fake`` undetached, so differentiate them with
        respect to discriminator parameters only.
    """
    w = weights or LossWeights()
    flags = w.flags
    zero = fake.new_zeros(())
    g, dd, dr = {}, {}, {}
    per_scale = {}

    n_scales = domain_disc.n_scales if flags.domain_multiscale else 1
    need_domain = flags.domain_adv or flags.fm_domain
    if need_domain:
        d_real = domain_disc(x, y, state, n_scales=n_scales)
        d_fake = domain_disc(x, fake, state, n_scales=n_scales)
    if flags.domain_adv:
        g_adv = [lsgan_term(m, 1.0) for m in d_fake]
        g["domain_adv"] = _mean(g_adv)
        per_scale["domain_adv"] = g_adv
        dd["real"] = _mean([lsgan_term(m, 1.0) for m in d_real])
        dd["fake"] = _mean([lsgan_term(m, 0.0) for m in d_fake])
        if flags.unassociated and y_unassoc is not None:
            d_un = domain_disc(x, y_unassoc, state, n_scales=n_scales)
            dd["unassoc"] = _mean([lsgan_term(m, 0.0) for m in d_un])

    if flags.uses_realfake_disc:
        if realfake_disc is None:
            raise ValueError("enabled terms need a real/fake discriminator")
        heads = (0, 1, 2) if flags.realfake_multiscale else (2,)
        r_fake = realfake_disc(fake, state)
        if flags.realfake or flags.fm_realfake:
            r_real = realfake_disc(y, state)
        if flags.realfake:
            g_adv = [lsgan_term([r_fake.scores[k]], 1.0) for k in heads]
            g["realfake_adv"] = _mean(g_adv)
            per_scale["realfake_adv"] = g_adv
            dr["real"] = _mean([lsgan_term([r_real.scores[k]], 1.0) for k in heads])
            dr["fake"] = _mean([lsgan_term([r_fake.scores[k]], 0.0) for k in heads])

    if flags.fm_domain:
        g["fm_domain"] = torch.stack(
            [feature_matching_term(a.features, b.features, w) for a, b in zip(d_real, d_fake)]).sum()
    if flags.fm_realfake:
        g["fm_realfake"] = feature_matching_term(r_real.features, r_fake.features, w)
    if flags.input_consistency:
        with torch.no_grad():
            r_input = realfake_disc(x, state)
        g["input_consistency"] = input_consistency_term(r_input.features, r_fake.features, w)

    l1 = l1_term(y, fake)
    if flags.l1:
        g["l1"] = w.lambda_l1 * l1

    g_loss = sum(g.values(), zero)
    dd_loss = sum(dd.values(), zero)
    dr_loss = sum(dr.values(), zero)
    record = LossRecord(
        generator={k: _scalar(v) for k, v in g.items()},
        domain={k: _scalar(v) for k, v in dd.items()},
        realfake={k: _scalar(v) for k, v in dr.items()},
        per_scale={k: [_scalar(t) for t in v] for k, v in per_scale.items()},
        l1=_scalar(l1),
        modifiers=tuple(m for m in MODIFIERS if getattr(flags, m)),
    )
    return g_loss, dd_loss, dr_loss, record
