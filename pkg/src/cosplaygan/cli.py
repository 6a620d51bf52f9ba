"""Command line entry points: prepare, train, generate, evaluate, report.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Relative paths resolve against the workspace (``--workspace``, else
``$COSPLAYGAN_DATA_ROOT``, else the current directory).
"""

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from ._validation import sub_rng, tensor_to_hwc, to_uint8
from .dataset_pipeline import PrepareConfig, load_pairs, prepare
from .evaluation import (
    MeanRGBExtractor,
    PixelExtractor,
    RandomConvExtractor,
    evaluation_report,
    read_report,
    render_table,
    write_report,
)
from .losses import GROUND_TRUTH_LABEL, ladder_label
from .synthetic import make_costume_pairs
from .training import (
    CheckpointError,
    PairedDataset,
    RunManifest,
    TrainConfig,
    Trainer,
    load_generator,
)

logger = logging.getLogger("cosplaygan")

DATA_ROOT_ENV = "COSPLAYGAN_DATA_ROOT"
CONFIG_ECHO = "config.yaml"
LAST_CHECKPOINT = "checkpoint_last.pt"
REPORT_NAME = "evaluation.json"
EXTRACTORS = {"mean-rgb": MeanRGBExtractor, "pixels": PixelExtractor,
              "random-conv": RandomConvExtractor}


class UsageError(ValueError):
    pass


def default_config():
    train = TrainConfig().to_dict()
    train.pop("seed")
    prep = PrepareConfig().to_dict()
    prep.pop("seed")
    return {
        "seed": 0,
        "prepare": prep,
        "train": train,
        "data": {"source": "synthetic", "n_pairs": 500, "n_test": 100},
        "evaluate": {"fid_extractor": "mean-rgb", "lpips_extractor": "pixels", "batch_size": 32},
    }


def _merge(base, update, where=""):
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "flags" and k != "models":
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def resolve_config(path=None, overrides=(), seed=None):
    cfg = default_config()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = {}
        cur = node
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = yaml.safe_load(raw)
        _merge(cfg, node)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def train_config(cfg, stage=None):
    t = dict(cfg["train"], seed=cfg["seed"])
    tc = TrainConfig.from_dict(t)
    if stage is not None:
        if not 0 <= stage < tc.n_stages:
            raise UsageError(f"--stage must lie in 0..{tc.n_stages - 1}")
        tc = dataclasses.replace(tc, max_resolution=tc.min_resolution * 2 ** stage)
    return tc


def _workspace(args):
    ws = args.workspace or os.environ.get(DATA_ROOT_ENV) or "."
    return Path(ws).resolve()


def _under(ws, p):
    p = Path(p)
    return p if p.is_absolute() else ws / p


def _echo(out, cfg, command, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(yaml.safe_dump(cfg, sort_keys=True))
    record = {"command": command, "config_sha256": hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest(), "seed": cfg["seed"]}
    record.update(extra or {})
    (out / f"{command}_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _data(cfg, ws, split, resolution, calibrated=True):
    """Anime/clothing tensors for ``split`` in [-1, 1] at ``resolution``."""
    data = cfg["data"]
    if data["source"] == "synthetic":
        n = data["n_pairs"] if split == "train" else data["n_test"]
        data_seed = int(sub_rng(cfg["seed"], "data", split).integers(2 ** 31))
        x, y, _ = make_costume_pairs(n, resolution, seed=data_seed)
        return x, y, [f"{split}-{i:05d}" for i in range(n)]
    if data["source"] == "workspace":
        x, y, ids = load_pairs(ws, split, resolution, calibrated)
        if not len(x):
            raise UsageError(f"no calibrated {split} pairs in {ws}; run prepare first")
        to_t = lambda a: torch.from_numpy(a.transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1)
        return to_t(x), to_t(y), ids
    raise UsageError(f"unknown data source {data['source']!r}")


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #

def cmd_prepare(args, cfg, ws):
    pcfg = PrepareConfig.from_dict(dict(cfg["prepare"], seed=cfg["seed"]))
    if not _under(ws, pcfg.input_dir).is_dir():
        raise UsageError(f"input directory {_under(ws, pcfg.input_dir)} does not exist")
    report = prepare(ws, pcfg)
    out = _under(ws, args.out) if args.out else ws
    _echo(out, cfg, "prepare", {"counts": report.counts, "processed": report.processed,
                                "warnings": report.warnings})
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({"counts": report.counts, "processed": report.processed}, sort_keys=True))
    return 0


def cmd_train(args, cfg, ws):
    tc = train_config(cfg, args.stage)
    out = _under(ws, args.out or "runs/default")
    x, y, ids = _data(cfg, ws, "train", tc.max_resolution, tc.term_flags().calibrated)
    dataset = PairedDataset(x, y, ids)
    RunManifest.open(out, tc, dataset)
    _echo(out, cfg, "train", {"stage": args.stage})
    last = out / LAST_CHECKPOINT
    if last.exists():
        trainer = Trainer.load_checkpoint(last, dataset, out)
        logger.info("resuming from step %d", trainer.step)
    else:
        trainer = Trainer(tc, dataset, out)
    trainer.fit()
    trainer.save_checkpoint(last)
    final = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"steps": trainer.step, "checkpoint": str(last),
                      "g/total": final.get("g/total")}, sort_keys=True))
    return 0


def _read_images(paths, resolution):
    arrs = []
    for p in paths:
        with Image.open(p) as im:
            arrs.append(np.asarray(im.convert("RGB").resize((resolution, resolution), Image.BICUBIC)))
    t = torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1)
    return t


def _list_images(items):
    out = []
    for s in items:
        p = Path(s)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg")))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"input {p} does not exist")
    return out


def contact_sheet(rows):
    """Stack rows of ``(N, 3, R, R)`` tensors into one uint8 image; column ``i`` is example ``i``."""
    strips = [np.concatenate(list(to_uint8(tensor_to_hwc(r))), axis=1) for r in rows]
    return np.concatenate(strips, axis=0)


def cmd_generate(args, cfg, ws):
    ckpt = _under(ws, args.checkpoint)
    g, state, _ = load_generator(ckpt, args.stage)
    inputs = _list_images([_under(ws, s) for s in args.inputs])
    if not inputs:
        raise UsageError("no input images")
    out = _under(ws, args.out or "generated")
    out.mkdir(parents=True, exist_ok=True)
    x = _read_images(inputs, state.resolution)
    with torch.no_grad():
        y_hat = g(x.to(next(g.parameters()).dtype), state)
    written = []
    for p, img in zip(inputs, to_uint8(tensor_to_hwc(y_hat))):
        dst = out / f"{p.stem}.png"
        Image.fromarray(img).save(dst)
        written.append(dst.name)
    rows = [x]
    if args.targets:
        targets = _list_images([_under(ws, s) for s in args.targets])
        if len(targets) != len(inputs):
            raise UsageError(f"{len(targets)} targets for {len(inputs)} inputs")
        rows.append(_read_images(targets, state.resolution))
    rows.append(y_hat)
    Image.fromarray(contact_sheet(rows)).save(out / "grid.png")
    _echo(out, cfg, "generate", {"checkpoint": str(ckpt), "outputs": written,
                                 "resolution": state.resolution})
    print(json.dumps({"outputs": len(written), "grid": str(out / "grid.png")}))
    return 0


def _run_checkpoint(run):
    last = run / LAST_CHECKPOINT
    if last.exists():
        return last
    manifest = run / RunManifest.FILENAME
    if manifest.exists():
        ckpts = json.loads(manifest.read_text()).get("checkpoints", [])
        if ckpts:
            return run / ckpts[-1]
    raise UsageError(f"{run} has no checkpoint")


def cmd_evaluate(args, cfg, ws):
    run = _under(ws, args.run)
    ev = cfg["evaluate"]
    fid_ex = EXTRACTORS[ev["fid_extractor"]]()
    lp_ex = EXTRACTORS[ev["lpips_extractor"]]()
    if args.ground_truth:
        tc = train_config(cfg, args.stage)
        _, y, _ = _data(cfg, ws, "test", tc.max_resolution)
        report = evaluation_report(y, y, fid_ex, lp_ex, GROUND_TRUTH_LABEL)
    else:
        ckpt = _under(ws, args.checkpoint) if args.checkpoint else _run_checkpoint(run)
        g, state, tcfg = load_generator(ckpt, args.stage)
        x, y, _ = _data(cfg, ws, "test", state.resolution)
        dtype = next(g.parameters()).dtype
        outs = []
        with torch.no_grad():
            for i in range(0, len(x), ev["batch_size"]):
                outs.append(g(x[i:i + ev["batch_size"]].to(dtype), state))
        label = args.label or ladder_label(tcfg.ladder)
        report = evaluation_report(torch.cat(outs), y, fid_ex, lp_ex, label)
        report["checkpoint"] = ckpt.name
        report["resolution"] = state.resolution
    path = write_report(report, run / REPORT_NAME)
    manifest = run / RunManifest.FILENAME
    if manifest.exists():
        data = json.loads(manifest.read_text())
        if REPORT_NAME not in data.get("evaluations", []):
            data.setdefault("evaluations", []).append(REPORT_NAME)
            manifest.write_text(json.dumps(data, indent=2, sort_keys=True))
    _echo(run, cfg, "evaluate", {"report": path.name})
    print(json.dumps({k: report[k] for k in ("label", "fid", "lpips")}, sort_keys=True))
    return 0


def cmd_report(args, cfg, ws):
    rows = []
    for r in args.runs:
        run = _under(ws, r)
        path = run / REPORT_NAME
        if path.exists():
            rows.append(read_report(path))
        else:
            logger.warning("%s has no evaluation report", run)
            rows.append({"label": run.name})
    table = render_table(rows, sort_by=args.sort)
    if args.out:
        out = _under(ws, args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        _echo(out.parent, cfg, "report", {"runs": list(args.runs), "table": out.name})
    print(table, end="")
    return 0


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--stage", type=int, help="progressive stage (resolution level) to use")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.lr=0.001 (repeatable)")
    common.add_argument("--out", help="output path")
    common.add_argument("--workspace", help=f"workspace root (default ${DATA_ROOT_ENV} or cwd)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cosplaygan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="clean and calibrate a raw image directory")
    sub.add_parser("train", parents=[common], help="train a model into --out")
    g = sub.add_parser("generate", parents=[common], help="translate images with a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("inputs", nargs="+", help="image files or directories")
    g.add_argument("--targets", nargs="+", help="ground-truth images to show in the grid")
    e = sub.add_parser("evaluate", parents=[common], help="write FID/LPIPS for a run")
    e.add_argument("run")
    e.add_argument("--checkpoint")
    e.add_argument("--label")
    e.add_argument("--ground-truth", action="store_true",
                   help="score the test targets against themselves")
    r = sub.add_parser("report", parents=[common], help="render a comparison table")
    r.add_argument("runs", nargs="+")
    r.add_argument("--sort", choices=["fid", "label"], default="fid")
    return parser


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "report": cmd_report}

VALIDATION_ERRORS = (UsageError, ValueError, KeyError, FileNotFoundError, CheckpointError,
                     yaml.YAMLError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ws = _workspace(args)
        cfg = resolve_config(_under(ws, args.config) if args.config else None, args.override,
                             args.seed)
        return COMMANDS[args.command](args, copy.deepcopy(cfg), ws)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
