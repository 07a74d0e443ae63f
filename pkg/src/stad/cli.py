"""Command-line entry points: ``gen-data``, ``train``, ``eval``, ``pseudo-label``.

Relative ``--data`` paths resolve against ``$STAD_DATA_ROOT`` when it is set.
Every command writes a ``manifest.json`` that echoes the config text verbatim.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, dump_config, parse_config
from .data import CLASS_NAMES, ConfigError, class_histogram, generate_synthetic, load_dataset, save_dataset
from .evaluation import frame_map, read_detections
from .fileio import atomic_write_text
from .model import ActionDetector, load_checkpoint
from .tla import write_pseudo_labels
from .trainer import (
    STRATEGIES,
    ClipSource,
    TrainingDiverged,
    TrainState,
    burn_in,
    calibrate_thresholds,
    checkpoint,
    evaluate,
    ground_truth,
    make_optimizer,
    pseudo_label,
    run_ssad,
)

log = logging.getLogger("stad")

DATA_ROOT_ENV = "STAD_DATA_ROOT"


class UsageError(Exception):
    pass


def _load_config(path) -> tuple[ExperimentConfig, str]:
    if path is None:
        cfg = ExperimentConfig()
        return cfg, dump_config(cfg)
    text = Path(path).read_text()
    return parse_config(text), text


def _data_path(arg) -> Path:
    if arg is None:
        root = os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise UsageError(f"--data not given and ${DATA_ROOT_ENV} is unset")
        return Path(root)
    p = Path(arg)
    root = os.environ.get(DATA_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _manifest(out: Path, command: str, args, config_text: str, **extra):
    rec = {
        "command": command,
        "args": _args_dict(args),
        "config": config_text,
        "torch": torch.__version__,
        **extra,
    }
    atomic_write_text(out / "manifest.json", json.dumps(rec, indent=2, default=str))


def cmd_gen_data(args) -> int:
    cfg, text = _load_config(args.config)
    ds = generate_synthetic(cfg.dataset, args.seed)
    out = Path(args.out)
    save_dataset(ds, out, {"config_text": text})
    hist = class_histogram(ds.train, cfg.dataset.num_classes)
    print(f"videos: {len(ds.videos)}  train labeled: {len(ds.train.labeled)}  "
          f"unlabeled: {len(ds.train.unlabeled)}  test labeled: {len(ds.test.labeled)}")
    for name, n in zip(CLASS_NAMES, hist):
        print(f"  {name:<11} {int(n)}")
    return 0


def _model_from_checkpoint(path, cfg: ExperimentConfig) -> tuple[ActionDetector, dict]:
    model = ActionDetector(cfg.model)
    manifest, _ = load_checkpoint(path, model)
    if manifest.get("config_hash") not in (None, cfg.model.digest()):
        raise UsageError("checkpoint was trained with a different model config")
    return model.eval(), manifest


def cmd_train(args) -> int:
    cfg, text = _load_config(args.config)
    ds = load_dataset(_data_path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src = ClipSource(ds.videos, ds.train, cfg.model.frames)
    if args.stage == "burn-in":
        if args.iterations is not None:
            cfg.train.iterations = args.iterations
        state = burn_in(src, cfg.train, cfg.model, args.seed, log_path=out / "metrics.jsonl")
        checkpoint(state, out / "student.npz", cfg.model)
        files = ["student.npz"]
    else:
        if args.checkpoint is None:
            raise UsageError("--stage ssad requires --checkpoint from burn-in")
        cfg.ssad.strategy = args.strategy or cfg.ssad.strategy
        if args.iterations is not None:
            cfg.ssad.iterations = args.iterations
        student, _ = _model_from_checkpoint(args.checkpoint, cfg)
        opt = make_optimizer(student, cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay)
        state = TrainState(student, None, opt, 0.0, seed=args.seed)
        state = run_ssad(state, src, cfg.train, cfg.ssad, log_path=out / "metrics.jsonl")
        checkpoint(state, out / "student.npz", cfg.model, "student")
        checkpoint(state, out / "teacher.npz", cfg.model, "teacher")
        files = ["student.npz", "teacher.npz"]
    atomic_write_text(out / "config.ini", text)
    _manifest(out, "train", args, text, files=files, model_config=asdict(cfg.model))
    print(f"wrote {', '.join(files)} to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg, text = _load_config(args.config)
    ds = load_dataset(_data_path(args.data))
    index = ds.test if args.split == "test" else ds.train
    ev = cfg.eval
    if args.detections:
        result = frame_map(read_detections(args.detections), ground_truth(index), cfg.model.num_classes, ev.iou_thresh)
    elif args.checkpoint:
        model, _ = _model_from_checkpoint(args.checkpoint, cfg)
        result = evaluate(
            model, ClipSource(ds.videos, index, cfg.model.frames), ev.iou_thresh,
            score_thresh=ev.score_thresh, nms_iou=ev.nms_iou, max_actors=ev.max_actors,
            action_thresh=ev.action_thresh,
        )
    else:
        raise UsageError("eval needs --checkpoint or --detections")
    for name, ap in zip(CLASS_NAMES, result.ap):
        print(f"  {name:<11} {'-' if np.isnan(ap) else f'{ap:.4f}'}")
    print(f"frame-mAP@{ev.iou_thresh}: {result.map:.4f}")
    if args.out:
        rec = {"split": args.split, **result.as_dict(), "config": text}
        atomic_write_text(Path(args.out), json.dumps(rec, indent=2))
    return 0


def cmd_pseudo_label(args) -> int:
    cfg, text = _load_config(args.config)
    if args.checkpoint is None:
        raise UsageError("pseudo-label requires --checkpoint")
    ds = load_dataset(_data_path(args.data))
    ssad = cfg.ssad
    ssad.strategy = args.strategy or ssad.strategy
    if ssad.strategy in ("ema", "none"):
        raise UsageError(f"strategy {ssad.strategy!r} produces no pseudo-labels")
    teacher, manifest = _model_from_checkpoint(args.checkpoint, cfg)
    src = ClipSource(ds.videos, ds.train, cfg.model.frames)
    state = TrainState(teacher, teacher, None, 0.0, iteration=manifest.get("iteration", 0), stage="ssad")
    if ssad.strategy == "per-class":
        state.class_thresholds = calibrate_thresholds(teacher, src, ssad.target_precision)
    limit = len(ds.train.unlabeled) if args.limit is None else min(args.limit, len(ds.train.unlabeled))
    records = []
    for i in range(limit):
        clip, left, right, t = src.unlabeled(i)
        c = ds.train.unlabeled[i]
        p = pseudo_label(state, clip, left, right, t, ssad)
        records.append(p.to_record(f"{c.video}/{c.frame}", t))
    out = Path(args.out)
    write_pseudo_labels(out, records)
    side = out.with_name(out.name + ".manifest.json")
    atomic_write_text(side, json.dumps({"args": _args_dict(args), "config": text, "records": len(records)}, indent=2))
    if args.render:
        from .render import render_pseudo_labels

        render_pseudo_labels(Path(args.render), ds.videos, ds.train.unlabeled[:limit], records)
    print(f"wrote {len(records)} pseudo-label records to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI experiment config (defaults when omitted)")
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV})")

    g = sub.add_parser("gen-data", help="generate and save the synthetic dataset")
    common(g, data=False)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="burn-in or semi-supervised training")
    common(t)
    t.add_argument("--stage", choices=("burn-in", "ssad"), default="burn-in")
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--checkpoint", help="burn-in checkpoint (ssad stage)")
    t.add_argument("--iterations", type=int, help="override the configured iteration count")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame-mAP of a checkpoint or a detections file")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--detections", help="JSON-lines detections instead of a checkpoint")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", help="write the result as JSON")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("pseudo-label", help="dump teacher pseudo-labels for unlabeled clips")
    common(q)
    q.add_argument("--checkpoint")
    q.add_argument("--strategy", choices=[s for s in STRATEGIES if s not in ("ema", "none")])
    q.add_argument("--limit", type=int, help="only the first N unlabeled clips")
    q.add_argument("--render", help="directory for PNG overlays")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_pseudo_label)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError, FileNotFoundError, KeyError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
