"""Command-line entry points: ``jointsod <command> [options]``.

Exit codes: 0 on success, 1 on a runtime failure (bad data, divergence,
checkpoint mismatch), 2 on a usage error.

Setting ``JOINTSOD_DETERMINISTIC=0`` disables deterministic torch kernels;
they are on by default.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .core import DataError, ImageTensor, Task, list_dataset, load_dataset, load_record, rng_for, save_mask, set_deterministic
from .datapipe import (
    CropSpec,
    crop_box,
    make_toy_dataset,
    select_bridge,
    select_interaction,
    write_augmentation_manifest,
)
from .metrics import evaluate_dirs
from .trainer import PRESETS, IsolationError, TrainConfig, TrainingDiverged, TrainState, run

log = logging.getLogger("jointsod")

DETERMINISTIC_ENV = "JOINTSOD_DETERMINISTIC"
STUDY_MODES = ("ccrop", "mcrop", "lcrop", "raw")


class UsageError(Exception):
    """Bad flags or config keys; maps to exit code 2."""


# -- config files -------------------------------------------------------------


def _convert(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in text.replace(" ", "").split(",") if v)
    if default is None:
        return None if text.lower() in ("", "none") else text
    return type(default)(text)


def parse_config_text(text: str, base: TrainConfig | None = None) -> dict:
    """Parse flat ``key = value`` lines (``#`` comments) against TrainConfig fields."""
    base = base or TrainConfig()
    known = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        try:
            out[key] = _convert(known[key], value)
        except ValueError as exc:
            raise UsageError(f"config line {n}: bad value for {key}: {exc}") from None
    return out


def build_train_config(args) -> TrainConfig:
    base = TrainConfig.paper() if args.profile == "paper" else TrainConfig.desk()
    values = base.to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), base))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values.update(parse_config_text(item, base))
    flag_map = {
        "preset": args.preset,
        "max_steps": args.max_steps,
        "batch_size": args.batch_size,
        "image_size": args.image_size,
        "checkpoint_every": args.checkpoint_every,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if values["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {values['preset']!r}; choose from {sorted(PRESETS)}")
    return TrainConfig.from_dict(values)


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    config = build_train_config(args)
    config = TrainConfig.from_dict({**config.to_dict(), "deterministic": _deterministic()})
    out = Path(args.out)
    log.info("training preset %s for %d steps into %s", config.preset, config.max_steps, out)
    records = []

    def keep(state, rec):
        records.append(rec)
        if args.log_every and rec["step"] % args.log_every == 0:
            terms = {k: round(v, 4) for k, v in rec.items() if k.endswith(("_str", "_total"))}
            log.info("step %d %s", rec["step"], terms)

    run(config, args.sod_root, args.cod_root, args.bridge_root, out, resume=args.resume, callback=keep)
    (out / "config.cfg").write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in config.to_dict().items()))
    if records:
        tail = records[-max(1, len(records) // 10):]
        keys = sorted(k for k in tail[-1] if k.startswith(("sod_", "cod_")))
        summary = {k: float(np.mean([r[k] for r in tail if k in r])) for k in keys}
        print(f"final losses (mean of last {len(tail)} steps):")
        for k, v in summary.items():
            print(f"  {k:<12} {v:.4f}")
    print(f"checkpoint: {out / 'last.pt'}")
    return 0


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)


def cmd_predict(args) -> int:
    state = TrainState.load(args.checkpoint, expected_hash=args.expect_hash)
    predictor = state.predictor(args.task, size=args.size, with_uncertainty=True)
    out = Path(args.out)
    items = list_dataset(args.data, Task.BRIDGE)
    for rid, img_path, _ in items:
        pred, unc = predictor(load_record(img_path, record_id=rid).image)
        save_mask(pred, out / "pred" / f"{rid}.png")
        save_mask(unc, out / "unc" / f"{rid}.png")
    print(f"wrote {len(items)} predictions and uncertainty maps to {out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.gt)
    print(report.table(per_image=not args.summary))
    if args.out:
        report.write(args.out)
    return 0


def cmd_select_interaction(args) -> int:
    state = TrainState.load(args.checkpoint)
    cod = load_dataset(args.cod_root, Task.COD)
    report = select_interaction(cod, state.predictor("sod", size=args.size), M=args.M)
    report_path = Path(args.report) if args.report else Path(args.sod_root).parent / "interaction_report.tsv"
    report.write(report_path)
    manifest = write_augmentation_manifest(args.sod_root, args.cod_root, report.chosen_ids)
    print(f"selected {len(report.chosen)} of {len(cod)} COD samples; manifest {manifest}")
    return 0


def cmd_select_bridge(args) -> int:
    sod = TrainState.load(args.sod_checkpoint)
    cod = TrainState.load(args.cod_checkpoint)
    task = Task.COD if args.use_masks else Task.BRIDGE
    pool = load_dataset(args.pool, task)
    sod_task_model = sod.predictor("sod", size=args.size)
    cod_task_model = cod.predictor("cod", size=args.size)
    report = select_bridge(pool, sod_task_model, cod_task_model, K=args.K, use_masks=args.use_masks)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = {rid: p for rid, p, _ in list_dataset(args.pool, Task.BRIDGE)}
    for rid in report.chosen_ids:
        shutil.copyfile(paths[rid], out / "images" / paths[rid].name)
    report.write(out / "bridge_report.tsv")
    print(f"bridge set: {len(report.chosen)} images in {out / 'images'}")
    return 0


def crop_study_record(predictor, record, rng):
    """The four crop-conditioned predictions in raw coordinates and their variance."""
    h, w = record.image.shape
    maps = {}
    for mode in STUDY_MODES:
        top, left, bottom, right = crop_box(record.mask, CropSpec(mode), rng)
        canvas = np.zeros((h, w))
        patch = record.image.data[top : bottom + 1, left : right + 1]
        if min(patch.shape[:2]) < 8:
            # too small to feed the network on its own; fall back to the full frame
            top, left, bottom, right = 0, 0, h - 1, w - 1
            patch = record.image.data
        canvas[top : bottom + 1, left : right + 1] = predictor(ImageTensor(patch))
        maps[mode] = canvas
    variance = np.stack(list(maps.values())).var(axis=0)
    return maps, variance


def cmd_crop_study(args) -> int:
    state = TrainState.load(args.checkpoint)
    predictor = state.predictor(args.task, size=args.size)
    out = Path(args.out)
    summary = {}
    for k, rec in enumerate(load_dataset(args.cod_root, Task.COD)):
        if rec.mask.data.sum() == 0:
            print(f"skipping {rec.id}: empty foreground mask", file=sys.stderr)
            continue
        maps, var = crop_study_record(predictor, rec, rng_for(args.seed, k))
        for mode, m in maps.items():
            save_mask(m, out / mode / f"{rec.id}.png")
        span = var.max() - var.min()
        save_mask((var - var.min()) / span if span > 0 else np.zeros_like(var), out / "variance" / f"{rec.id}.png")
        np.save(out / "variance" / f"{rec.id}.npy", var)
        summary[rec.id] = {"mean_variance": float(var.mean()), "max_variance": float(var.max())}
    (out / "variance.json").write_text(json.dumps(summary, indent=1))
    if summary:
        mean = float(np.mean([v["mean_variance"] for v in summary.values()]))
        print(f"{len(summary)} images; mean cropping variance {mean:.5f}")
    return 0


def cmd_make_toy(args) -> int:
    roots = make_toy_dataset(args.n_sod, args.n_cod, args.size, args.seed, args.out, n_bridge=args.n_bridge)
    for name in ("sod", "cod", "bridge"):
        root = getattr(roots, name)
        if root is not None:
            print(f"{name}: {root}")
    return 0


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointsod", description="Joint salient / camouflaged object detection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None if name == "train" else 0)
        sp.set_defaults(func=fn)
        return sp

    t = add("train", cmd_train, "Train a preset (ablation row) and write checkpoints and logs.")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--config", help="flat key = value file with TrainConfig fields")
    t.add_argument("--profile", choices=("desk", "paper"), default="desk", help="base schedule before overrides")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    t.add_argument("--sod-root")
    t.add_argument("--cod-root")
    t.add_argument("--bridge-root")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--image-size", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int, default=100)

    pr = add("predict", cmd_predict, "Write prediction and uncertainty PNGs for every image in a dataset.")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True, help="dataset root containing images/")
    pr.add_argument("--task", choices=("sod", "cod"), required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--size", type=int, help="network input size (default: training size)")
    pr.add_argument("--expect-hash", help="refuse checkpoints whose architecture hash differs")

    ev = add("eval", cmd_eval, "Score predictions against ground truth: S_alpha, F_beta, E_xi, M.")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--out", help="write the per-image report as JSON lines")
    ev.add_argument("--summary", action="store_true", help="print only the mean row")

    si = add("select-interaction", cmd_select_interaction, "Rank COD samples under a SOD model and write the augmentation manifest.")
    si.add_argument("--checkpoint", required=True, help="plain SOD checkpoint")
    si.add_argument("--sod-root", required=True)
    si.add_argument("--cod-root", required=True)
    si.add_argument("-M", type=int, default=403)
    si.add_argument("--report")
    si.add_argument("--size", type=int)

    sb = add("select-bridge", cmd_select_bridge, "Pick the bridge set from an image pool by SOD/COD disagreement.")
    sb.add_argument("--sod-checkpoint", required=True)
    sb.add_argument("--cod-checkpoint", required=True)
    sb.add_argument("--pool", required=True)
    sb.add_argument("--out", required=True)
    sb.add_argument("-K", type=int, default=200)
    sb.add_argument("--use-masks", action="store_true", help="score against pool masks instead of the COD map")
    sb.add_argument("--size", type=int)

    cs = add("crop-study", cmd_crop_study, "Predict under four crops and write the per-pixel variance maps.")
    cs.add_argument("--checkpoint", required=True)
    cs.add_argument("--cod-root", required=True)
    cs.add_argument("--out", required=True)
    cs.add_argument("--task", choices=("sod", "cod"), default="cod")
    cs.add_argument("--size", type=int)

    mt = add("make-toy", cmd_make_toy, "Generate the synthetic SOD / COD / bridge datasets.")
    mt.add_argument("--out", required=True)
    mt.add_argument("--n-sod", type=int, default=200)
    mt.add_argument("--n-cod", type=int, default=200)
    mt.add_argument("--n-bridge", type=int, default=0)
    mt.add_argument("--size", type=int, default=64)
    return p


def _deterministic() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "1").strip().lower() not in ("0", "false", "no", "off")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if _deterministic():
        set_deterministic(args.seed if args.seed is not None else 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jointsod {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingDiverged, IsolationError, OSError, ValueError) as exc:
        print(f"jointsod {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
