"""Command-line surface: labelgen, synth, fit, detect, eval, gradcheck.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Every
command is deterministic given its seed flags; artifacts carry no
timestamps.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import data_io, evalharness, gradsuite, pipeline, priors
from .errors import BpdoError

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bpdo",
        description=(
            "Arbitrary-shape text detection at desk scale: prior-map labels, "
            "attention fusion, boundary proposals, and iterative point refinement."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("labelgen", help="generate prior maps from annotation files")
    p.add_argument("paths", nargs="+", help="annotation file(s)")
    p.add_argument(
        "--format", required=True, choices=sorted(data_io.PARSERS), dest="fmt"
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", type=int, default=128)
    p.add_argument("--cols", type=int, default=128)

    p = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=128)
    p.add_argument("--cols", type=int, default=128)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=3)

    p = sub.add_parser("fit", help="train on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("detect", help="run detection with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="scene corpus directory")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSON from detect")
    p.add_argument("--gt", required=True, help="scene ground-truth JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="report path (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--suite", required=True, choices=gradsuite.SUITES)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_labelgen(args) -> int:
    parse = data_io.PARSERS[args.fmt]
    os.makedirs(args.out, exist_ok=True)
    failures = 0
    scenes = []
    for path in args.paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            with open(path, "r", encoding="utf-8", errors="strict") as fh:
                instances = parse(fh.read())
        except (OSError, UnicodeDecodeError, BpdoError) as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            failures += 1
            continue
        if not instances:
            continue
        verts = np.vstack([inst.polygon.vertices for inst in instances])
        src_cols = max(float(verts[:, 0].max()) + 1.0, 1.0)
        src_rows = max(float(verts[:, 1].max()) + 1.0, 1.0)
        scaled = data_io.scale_instances(
            instances, src_cols, src_rows, args.cols, args.rows
        )
        maps = priors.make_prior_maps(
            [inst.polygon for inst in scaled], args.rows, args.cols
        )
        for name, field in (
            ("cls", maps.cls),
            ("dist", maps.dist),
            ("dirx", maps.dir_x),
            ("diry", maps.dir_y),
        ):
            data_io.write_container(
                os.path.join(args.out, f"{stem}_{name}.bpdt"), field, f"{stem}/{name}"
            )
        overlay = maps.dist.data[0].copy()
        overlay[maps.cls.data[0] > 0.5] = np.maximum(
            overlay[maps.cls.data[0] > 0.5], 0.25
        )
        data_io.export_png(overlay, os.path.join(args.out, f"{stem}_overlay.png"))
        scenes.append(
            data_io.SceneRecord(
                id=stem,
                rows=args.rows,
                cols=args.cols,
                polygons=[inst.polygon for inst in scaled],
                ignore_flags=[inst.ignore for inst in scaled],
            )
        )
    if scenes:
        with open(os.path.join(args.out, "scenes.json"), "w", encoding="utf-8") as fh:
            fh.write(data_io.scenes_to_json(scenes))
    return RUNTIME_ERROR if failures else 0


def cmd_synth(args) -> int:
    if args.count < 1:
        print("error: --count must be at least 1", file=sys.stderr)
        return USAGE_ERROR
    if args.min_instances < 0 or args.max_instances < args.min_instances:
        print("error: bad instance range", file=sys.stderr)
        return USAGE_ERROR
    os.makedirs(args.out, exist_ok=True)
    master = np.random.default_rng(args.seed)
    scenes = []
    for i in range(args.count):
        scene_seed = int(master.integers(0, 2**31 - 1))
        n_inst = int(master.integers(args.min_instances, args.max_instances + 1))
        rec = data_io.synth_scene(
            scene_seed, args.rows, args.cols, n_inst, args.channels
        )
        rec.id = f"scene-{i:04d}"
        data_io.write_container(
            os.path.join(args.out, f"{rec.id}.bpdt"), rec.features, rec.id
        )
        scenes.append(rec)
    with open(os.path.join(args.out, "scenes.json"), "w", encoding="utf-8") as fh:
        fh.write(data_io.scenes_to_json(scenes))
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _load_config(args) -> pipeline.PipelineConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = pipeline.PipelineConfig.from_text(fh.read())
    else:
        config = pipeline.PipelineConfig()
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        flat = config.flatten()
        for key, val in overrides.items():
            flat[f"fit.{key}"] = val
        config = pipeline.PipelineConfig.from_flat(flat)
    return config


def cmd_fit(args) -> int:
    config = _load_config(args)
    scenes = pipeline.load_corpus(args.corpus)

    def progress(epoch, report):
        if not args.quiet and (epoch % 10 == 0 or epoch == config.fit.epochs - 1):
            print(
                f"epoch {epoch:4d}  total {report.total:.4f}  "
                f"cls {report.l_cls:.4f}  dis {report.l_dis:.4f}  "
                f"dir {report.l_dir:.4f}  pm {report.l_pm:.4f}"
            )

    result = pipeline.fit(scenes, config, progress=progress)
    result.checkpoint.save(args.out)
    curve_path = os.path.splitext(args.out)[0] + "_losscurve.csv"
    with open(curve_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "l_cls", "l_dis", "l_dir", "l_pm", "schedule_factor", "total"]
        )
        for rep in result.curve:
            writer.writerow(
                [rep.epoch, rep.l_cls, rep.l_dis, rep.l_dir, rep.l_pm,
                 rep.schedule_factor, rep.total]
            )
    print(f"checkpoint: {args.out}")
    print(f"loss curve: {curve_path}")
    return 0


def cmd_detect(args) -> int:
    ckpt = pipeline.Checkpoint.load(args.checkpoint)
    scenes = pipeline.load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    detections = pipeline.detect_corpus(scenes, ckpt)
    with open(os.path.join(args.out, "predictions.json"), "w", encoding="utf-8") as fh:
        fh.write(pipeline.detections_to_json(detections))
    for det in detections:
        overlay = det.pred_maps[1].astype(np.float64).copy()
        marker = float(overlay.max()) + 0.25
        for ring in det.polygons:
            arr = np.asarray(ring)
            xs = np.clip(np.rint(arr[:, 0]).astype(int), 0, overlay.shape[1] - 1)
            ys = np.clip(np.rint(arr[:, 1]).astype(int), 0, overlay.shape[0] - 1)
            overlay[ys, xs] = marker
        data_io.export_png(overlay, os.path.join(args.out, f"{det.scene_id}_det.png"))
    print(f"wrote predictions for {len(detections)} scenes to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not (0.0 < args.threshold):
        print("error: --threshold must be positive", file=sys.stderr)
        return USAGE_ERROR
    with open(args.pred, "r", encoding="utf-8") as fh:
        payload = pipeline.detections_from_json(fh.read())
    preds = pipeline.detection_polygons(payload)
    with open(args.gt, "r", encoding="utf-8") as fh:
        gt_scenes = data_io.scenes_from_json(fh.read())
    gts = {
        rec.id: list(zip(rec.polygons, rec.ignore_flags)) for rec in gt_scenes
    }
    for sid in gts:
        preds.setdefault(sid, [])
    report = evalharness.evaluate(preds, gts, iou_threshold=args.threshold)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)
    print(
        f"P {report.precision:.4f}  R {report.recall:.4f}  F {report.f_measure:.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradsuite.run_suite(args.suite, seed=args.seed)
    failed = False
    for rep in reports:
        print(rep.line())
        failed = failed or not rep.passed
    return RUNTIME_ERROR if failed else 0


_COMMANDS = {
    "labelgen": cmd_labelgen,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return _COMMANDS[args.command](args)
    except BpdoError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
