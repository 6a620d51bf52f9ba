"""Resumable runner chaining filter -> crop -> dedup -> calibrate -> split over a directory."""

import json
import logging
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .manifest import KeypointSet, Manifest, Record
from .plugins import DEFAULT_BINDINGS, PluginError, load_rgb, resolve, save_png
from .stages import (
    DEFAULT_SPLIT_RATIO,
    DuplicateGrouper,
    UndetectedError,
    calibrate,
    content_key,
    crop_regions,
    filter_pairs,
    split_dataset,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class PrepareConfig:
    input_dir: str = "raw"
    threshold: float = 0.5
    dedup_threshold: float = 0.90
    pad_fraction: float = 0.5
    blur_sigma: float = 0.02
    confidence_floor: float = 0.1
    split_ratio: float = DEFAULT_SPLIT_RATIO
    seed: int = 0
    models: dict = field(default_factory=lambda: dict(DEFAULT_BINDINGS))
    save_every: int = 50

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        models = dict(DEFAULT_BINDINGS)
        models.update(d.pop("models", None) or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown prepare keys: {sorted(unknown)}")
        return cls(models=models, **d)

    def to_dict(self):
        d = asdict(self)
        d["models"] = {k: (v if isinstance(v, (str, list, type(None))) else repr(v))
                       for k, v in self.models.items()}
        return d


@dataclass
class PrepareReport:
    counts: dict = field(default_factory=dict)
    processed: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    manifest_path: str = ""

    @property
    def reprocessed(self):
        return sum(self.processed.values())


def _relative(path, root):
    try:
        return str(Path(path).resolve().relative_to(Path(root).resolve()))
    except ValueError:
        return str(Path(path).resolve())


def _write_image(array, workspace, subdir):
    key = content_key(array)
    rel = Path(subdir) / f"{key}.png"
    out = Path(workspace) / rel
    if not out.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_suffix(".tmp.png")
        save_png(array, tmp)
        tmp.replace(out)
    return str(rel)


class _Run:
    def __init__(self, workspace, cfg):
        self.ws = Path(workspace)
        self.cfg = cfg
        self.manifest_path = self.ws / MANIFEST_NAME
        self.manifest = Manifest.load(self.manifest_path)
        self.report = PrepareReport(manifest_path=str(self.manifest_path))
        self._dirty = 0

    def warn(self, msg, record=None):
        logger.warning(msg)
        self.report.warnings.append(msg)
        if record is not None and msg not in record.warnings:
            record.warnings.append(msg)

    def touched(self, stage, record):
        self.report.processed[stage] = self.report.processed.get(stage, 0) + 1
        self._dirty += 1
        if self._dirty >= self.cfg.save_every:
            self.save()

    def save(self):
        self.manifest.save(self.manifest_path)
        self._dirty = 0

    def plugin(self, role):
        binding = self.cfg.models.get(role)
        fn = resolve(role, binding)
        if fn is None:
            self.warn(f"no usable {role} binding ({binding!r}); {role} stage skipped")
        return fn

    def path(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.ws / p


def _scan(run, input_dir):
    input_dir = Path(input_dir)
    if not input_dir.is_absolute():
        input_dir = run.ws / input_dir
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory {input_dir} does not exist")
    files = sorted(p for p in input_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        run.warn(f"no images found in {input_dir}")
    for p in files:
        rel = _relative(p, run.ws)
        if rel not in run.manifest:
            run.manifest.add(Record(id=rel, path=rel))
            run.touched("scan", None)


def _filter(run):
    classify = run.plugin("classifier")
    if classify is None:
        return
    filter_pairs(run.manifest, classify, run.cfg.threshold, run.ws, run.warn,
                 on_update=lambda r: run.touched("filter", r))


def _crop(run):
    detect = run.plugin("detector")
    if detect is None:
        return
    for r in run.manifest.with_status("filtered"):
        path = run.path(r.path)
        try:
            img = load_rgb(path)
            boxes = detect(str(path))["boxes"]
            char, cloth, best = crop_regions(img, boxes)
        except UndetectedError as err:
            r.advance("undetected")
            run.warn(f"{r.id}: {err}", r)
            run.touched("crop", r)
            continue
        except (PluginError, KeyError, TypeError, ValueError, OSError) as err:
            run.warn(f"{r.id}: detector failed ({err})", r)
            continue
        r.regions = [asdict(best[k]) for k in ("character", "clothing")]
        r.character_path = _write_image(char, run.ws, "crops")
        r.clothing_path = _write_image(cloth, run.ws, "crops")
        r.advance("cropped")
        run.touched("crop", r)


def _dedup(run):
    members = [r for r in run.manifest if r.reached("cropped") or r.status == "duplicate"]
    if not members:
        return
    images = [load_rgb(run.path(r.path)) for r in members]
    labels = DuplicateGrouper(run.cfg.dedup_threshold).fit_predict(images)
    groups = {}
    for r, g in zip(members, labels):
        groups.setdefault(int(g), []).append(r)
    for rs in groups.values():
        # an already-promoted member stays the representative
        advanced = [r for r in rs if r.reached("deduped")]
        rep = min(advanced or rs, key=lambda r: r.id)
        for r in rs:
            changed = r.group != rep.id
            r.group = rep.id
            if r.status == "cropped":
                r.advance("deduped" if r is rep else "duplicate")
                changed = True
            if changed:
                run.touched("dedup", r)


def _calibrate(run):
    pending = run.manifest.with_status("deduped")
    if not pending:
        return
    keypoints = run.plugin("keypoints")
    upscaler = run.plugin("upscaler")
    if keypoints is None or upscaler is None:
        return
    with tempfile.TemporaryDirectory() as tmp:
        def sr(array):
            src = Path(tmp) / "in.png"
            dst = Path(tmp) / "out.png"
            save_png(array, src)
            return load_rgb(upscaler(str(src), str(dst))["path"])

        for r in pending:
            cloth_path = run.path(r.clothing_path)
            try:
                img = load_rgb(cloth_path)
                pts = KeypointSet(keypoints(str(cloth_path))["keypoints"])
            except (PluginError, KeyError, TypeError, ValueError, OSError) as err:
                run.warn(f"{r.id}: keypoint detector failed ({err})", r)
                continue
            h, w = img.shape[:2]
            inside = [p for p in pts if 0 <= p.x <= w - 1 and 0 <= p.y <= h - 1]
            if len(inside) < len(pts):
                run.warn(f"{r.id}: dropped {len(pts) - len(inside)} keypoints outside the image", r)
            try:
                cal = calibrate(img, inside, sr, run.cfg.pad_fraction, run.cfg.blur_sigma,
                                run.cfg.confidence_floor)
            except (PluginError, KeyError, ValueError, OSError) as err:
                run.warn(f"{r.id}: upscaler failed ({err})", r)
                continue
            if cal.fallback:
                run.warn(f"{r.id}: no confident keypoints, centred on the image", r)
            r.center_x = cal.center_x
            r.center_fallback = cal.fallback
            r.calibrated_path = _write_image(cal.image, run.ws, "calibrated")
            r.advance("calibrated")
            run.touched("calibrate", r)


def _split(run):
    _, changed = split_dataset(run.manifest, run.cfg.split_ratio, run.cfg.seed)
    for rid in changed:
        run.touched("split", run.manifest[rid])


def prepare(workspace, config=None):
    """Bring every image under ``config.input_dir`` as far through the pipeline as possible.

    Only records waiting at a stage's input status are processed, and the
    manifest is checkpointed as it goes, so an interrupted run resumes where it
    stopped and a finished run is a no-op. Returns a :class:`PrepareReport`.
    """
    cfg = config if isinstance(config, PrepareConfig) else PrepareConfig.from_dict(config or {})
    run = _Run(workspace, cfg)
    run.ws.mkdir(parents=True, exist_ok=True)
    _scan(run, cfg.input_dir)
    for stage in (_filter, _crop, _dedup, _calibrate, _split):
        stage(run)
        run.save()
    run.manifest.check_invariants()
    run.report.counts = run.manifest.counts()
    (run.ws / "prepare_report.json").write_text(json.dumps(asdict(run.report), indent=2, sort_keys=True))
    return run.report


def load_pairs(workspace, split="train", resolution=256, calibrated=True):
    """Finished (character, clothing) pairs of one split as uint8 ``(N, R, R, 3)`` arrays.

    With ``calibrated=False`` the clothing side is the raw crop instead of the
    re-centred image.
    """
    from PIL import Image

    ws = Path(workspace)
    manifest = Manifest.load(ws / MANIFEST_NAME)
    xs, ys, ids = [], [], []
    for r in manifest.with_status("calibrated"):
        if split is not None and r.split != split:
            continue
        pair = []
        for rel in (r.character_path, r.calibrated_path if calibrated else r.clothing_path):
            with Image.open(ws / rel) as im:
                pair.append(np.asarray(im.convert("RGB").resize((resolution, resolution),
                                                                Image.BICUBIC)))
        xs.append(pair[0])
        ys.append(pair[1])
        ids.append(r.id)
    shape = (0, resolution, resolution, 3)
    return (np.stack(xs) if xs else np.zeros(shape, np.uint8),
            np.stack(ys) if ys else np.zeros(shape, np.uint8), ids)
