"""Command-line interface: ``countadapt <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Machine-readable results go to stdout as JSON; human-readable tables go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradsuite
from .core import read_dmap, write_dmap
from .density import AnnotationError, save_annotations
from .metrics import format_report, report_json
from .nets import CheckpointError
from .synth import (
    generate_domain,
    has_annotations,
    load_dataset,
    load_image,
    load_spec_pair,
    preset_shift_pair,
    save_dataset,
)
from .train import (
    Checkpoint,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    adapt,
    evaluate_checkpoint,
    predict,
    pretrain,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or inputs; reported with exit code 2."""


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(path) -> TrainConfig:
    return TrainConfig() if path is None else TrainConfig.load(path)


def _log_path(args, out: Path) -> Path:
    return Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.n_eval < 0:
        raise UsageError("--n-eval must be >= 0")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out}: directory is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    if args.spec:
        source_spec, target_spec = load_spec_pair(args.spec)
        if args.seed is not None:
            source_spec = dataclasses.replace(source_spec, seed=args.seed)
            target_spec = dataclasses.replace(target_spec, seed=args.seed + 1)
    else:
        source_spec, target_spec = preset_shift_pair(args.seed or 0)

    source = generate_domain(source_spec, args.n)
    target = generate_domain(target_spec, args.n)
    save_dataset(source, out / "source")
    # target images sit in their own folder so adaption never sees the labels
    save_dataset(target, out / "target", with_annotations=False)
    save_annotations([s.ann for s in target], out / "target" / "annotations.json")
    written = {"source": str(out / "source"), "target": str(out / "target"), "target_images": str(out / "target" / "images")}
    if args.n_eval:
        held_out = generate_domain(target_spec, args.n_eval, start=args.n)
        save_dataset(held_out, out / "target-eval")
        written["target_eval"] = str(out / "target-eval")
    (out / "specs.json").write_text(
        json.dumps({"source": source_spec.to_dict(), "target": target_spec.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    print(json.dumps(written, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    source = load_dataset(args.data, channels=cfg.in_channels)
    train_log = TrainLog(_log_path(args, out))
    ckpt = pretrain(cfg, source, train_log)
    ckpt.save(out)
    last = train_log.records[-1]["L_dens"] if len(train_log) else None
    print(json.dumps({"checkpoint": str(out), "steps": len(train_log), "final_L_dens": last}))
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    if has_annotations(args.target) and not args.allow_annotated:
        raise UsageError(
            f"{args.target}: target directory contains annotation files; adaption must not see target labels "
            "(point --target at the image folder, or pass --allow-annotated)"
        )
    ckpt = Checkpoint.load(args.ckpt)
    source = load_dataset(args.source, channels=cfg.in_channels)
    target = load_dataset(args.target, channels=cfg.in_channels, require_annotations=False)
    eval_set = load_dataset(args.eval, channels=cfg.in_channels) if args.eval else None
    resuming = ckpt.stage == 2
    train_log = TrainLog(_log_path(args, out), append=resuming)
    result = adapt(cfg, ckpt, source, target, train_log, eval_set=eval_set, until=args.until)
    result.save(out)
    print(json.dumps({"checkpoint": str(out), "resumed_from": ckpt.step if resuming else None, "step": result.step}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if bool(args.ckpt) == bool(args.oracle):
        raise UsageError("give exactly one of --ckpt or --oracle")
    try:
        levels = sorted({int(v) for v in args.gmae_levels.split(",") if v.strip()})
    except ValueError as exc:
        raise UsageError(f"--gmae-levels: expected comma-separated integers, got {args.gmae_levels!r}") from exc
    if any(L < 0 for L in levels):
        raise UsageError("--gmae-levels: levels must be >= 0")
    ckpt = Checkpoint.load(args.ckpt) if args.ckpt else None
    cfg = ckpt.config if ckpt else _load_config(args.config)
    samples = load_dataset(args.data, channels=cfg.in_channels)
    name = args.name or Path(args.data).name
    report = evaluate_checkpoint(ckpt, samples, levels, use_roi=args.roi, name=name, config=cfg)
    print(report_json(report))
    _err(format_report(report))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    try:
        image = load_image(args.image, channels=ckpt.config.in_channels)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{args.image}: cannot read image: {exc}") from exc
    roi = None
    if args.roi:
        roi = load_image(args.roi)[0] > 0.5
    density, count = predict(ckpt, image, roi)
    write_dmap(args.out, density)
    print(json.dumps({"dmap": str(args.out), "count": count, "shape": list(density.shape)}))
    return EXIT_OK


def render_png(grid: np.ndarray, path) -> None:
    """Grayscale PNG: the map minimum is black and the maximum white; a flat map is black."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def cmd_render(args) -> int:
    render_png(read_dmap(args.dmap), args.out)
    print(json.dumps({"png": str(args.out)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.list:
        print(json.dumps(sorted(gradsuite.CASES)))
        return EXIT_OK
    names = args.op or None
    try:
        results = gradsuite.run_suite(names, seed=args.seed)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    for name, r in results.items():
        status = "ok" if r["ok"] else "FAIL"
        _err(f"{name:22s} {r['max_rel_error']:.3e}  checked {r['checked']:4d}  skipped {r['skipped']:3d}  {status}")
    all_ok = all(r["ok"] for r in results.values())
    print(json.dumps({"tolerance": gradsuite.TOLERANCE, "ok": all_ok, "ops": results}, sort_keys=True))
    return EXIT_OK if all_ok else EXIT_RUNTIME


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countadapt", description="Density-map counting with scale-aware adversarial adaption.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic source/target dataset pair")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=["shift"], help="built-in dense-small -> sparse-large pair")
    src.add_argument("--spec", help='JSON file {"source": DomainSpec, "target": DomainSpec}')
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, required=True, help="images per domain")
    g.add_argument("--n-eval", type=int, default=0, help="extra annotated held-out target images (target-eval/)")
    g.add_argument("--seed", type=int, default=None, help="domain seed (preset default 0; overrides --spec seeds)")
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="stage 1: fit the counting net on annotated source data")
    t.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    t.add_argument("--data", required=True, help="annotated source dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="stage 2: adversarial adaption to unlabelled target images")
    a.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    a.add_argument("--ckpt", required=True, help="pretrained checkpoint, or an adaption checkpoint to resume")
    a.add_argument("--source", required=True, help="annotated source dataset directory")
    a.add_argument("--target", required=True, help="directory of unlabelled target images")
    a.add_argument("--out", required=True, help="checkpoint path to write")
    a.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    a.add_argument("--eval", help="annotated held-out target directory for periodic snapshots")
    a.add_argument("--until", type=int, help="stop after this many adaption steps in total (resume later with --ckpt)")
    a.add_argument("--allow-annotated", action="store_true", help="accept a target directory that holds annotation files")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="MAE / MSE / GMAE report for a checkpoint")
    e.add_argument("--ckpt", help="checkpoint to score")
    e.add_argument("--oracle", action="store_true", help="score the ground-truth maps themselves")
    e.add_argument("--config", help="TrainConfig JSON for --oracle (density settings)")
    e.add_argument("--data", required=True, help="annotated dataset directory")
    e.add_argument("--gmae-levels", default="0,1,2,3", help="comma-separated GMAE levels")
    e.add_argument("--roi", action="store_true", help="restrict scoring to each annotation's ROI mask")
    e.add_argument("--name", help="dataset name in the report (default: directory name)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="density map (DMAP) and count for one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--roi", help="mask image; nonzero pixels are counted")
    r.add_argument("--out", required=True, help="DMAP file to write")
    r.set_defaults(func=cmd_predict)

    d = sub.add_parser("render", help="grayscale PNG of a DMAP file")
    d.add_argument("--dmap", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--op", action="append", help="run only this case (repeatable)")
    c.add_argument("--list", action="store_true", help="list case names and exit")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, AnnotationError, FileNotFoundError, FileExistsError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    except (TrainingDiverged, CheckpointError) as exc:
        _err(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
