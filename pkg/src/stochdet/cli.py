"""Command-line entry point: ``stochdet <command> [flags]``.

Every command writes its outputs plus ``metadata.json`` (command, arguments,
seed, config hash, package versions) into ``--out``, which defaults to the
``STOCHDET_OUT`` environment variable or ``./stochdet_out``. Outputs contain
no timestamps, so re-running a command with the same arguments rewrites the
same bytes.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy

from . import __version__
from .accumulator import AccumulatedDetections, accumulate
from .dataio import (
    AnnotationFile,
    DetectionFile,
    ImageRecord,
    RunManifest,
    annotations_from_pseudo_labels,
    dump_json,
    load_annotations,
    load_checkpoint,
    load_detections,
    load_scenes,
    read_json,
    save_annotations,
    save_checkpoint,
    save_detections,
    save_manifest,
    save_scenes,
    write_text,
)
from .boxgeom import Box
from .diffusion.denoiser import init_params
from .diffusion.sampler import SamplerConfig, sample_runs
from .diffusion.schedule import cosine_schedule
from .diffusion.training import OptimizerConfig, dataset_loss, train
from .errors import ConfigError, MismatchedImageIds, StochdetError
from .evaluation import EvalConfig, GroundTruth, evaluate
from .experiments import FinetuneConfig, SweepConfig, finetune_study, load_bundled_model, sweep
from .nms import DetectionSet, NmsConfig
from .pseudolabel import VerifiedRegionSet, filter_by_regions, make_pseudo_labels
from .simworld import generate_domain, load_preset, size_histogram

log = logging.getLogger("stochdet")

ENV_OUT = "STOCHDET_OUT"
BUNDLED = "bundled"
# arguments that do not change results
_NON_SEMANTIC = {"out", "jobs", "format", "verbose", "func"}


def _versions() -> dict:
    return {"stochdet": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _write_metadata(out: Path, args: argparse.Namespace) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_SEMANTIC}
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    meta = {
        "command": args.command,
        "config": config,
        "config_hash": digest,
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
    }
    write_text(out / "metadata.json", dump_json(meta))


def _report(args, text: str, obj) -> None:
    if args.format == "json":
        sys.stdout.write(dump_json(obj))
    else:
        sys.stdout.write(text)


def _model(path: str):
    if path == BUNDLED:
        return load_bundled_model()
    return load_checkpoint(path)


# --- commands ----------------------------------------------------------------------


def cmd_simulate(args, out: Path) -> None:
    cfg = load_preset(args.domain)
    if args.domain_seed is not None:
        cfg.seed = args.domain_seed
    scenes = generate_domain(cfg, args.scenes, start=args.start)
    save_scenes(out, scenes, name="scenes", domain=cfg.to_dict())
    hist = size_histogram(scenes)
    write_text(out / "size_histogram.csv", hist.to_csv())
    counts = {b.name.lower(): n for b, n in hist.counts.items()}
    summary = {"domain": cfg.name, "scenes": len(scenes), "objects": hist.total, "buckets": counts, "median_area": hist.median_area()}
    write_text(out / "summary.json", dump_json(summary))
    _report(args, f"{len(scenes)} scenes, {hist.total} objects, buckets {counts}\n", summary)


def cmd_train_toy(args, out: Path) -> None:
    if args.scenes_file:
        scenes, _ = load_scenes(args.scenes_file)
    else:
        scenes = generate_domain(load_preset(args.domain), args.scenes)
    schedule = cosine_schedule()
    params = init_params(np.random.default_rng(args.seed))
    cfg = OptimizerConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    initial = dataset_loss(params, scenes, schedule)
    params, trace = train(params, scenes, schedule, cfg)
    final = dataset_loss(params, scenes, schedule)
    meta = {"optimizer": asdict(cfg), "initial_loss": initial, "final_loss": final, "scenes": len(scenes)}
    save_checkpoint(out / "checkpoint.json", params, schedule, meta)
    write_text(out / "loss_trace.csv", "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace.tolist())))
    summary = {"initial_loss": initial, "final_loss": final, "ratio": final / initial}
    write_text(out / "summary.json", dump_json(summary))
    _report(args, f"loss {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f})\n", summary)


def cmd_detect(args, out: Path) -> None:
    params, schedule, _ = _model(args.checkpoint)
    scenes, _ = load_scenes(args.scenes_file)
    sampler = SamplerConfig(args.boxes, args.steps, args.f_box_size, args.seed)
    runs = []
    for s in scenes:
        runs.extend(sample_runs(s, params, args.runs, sampler, schedule))
    save_detections(out / "detections.json", DetectionFile.from_runs(runs))
    manifest = RunManifest(
        checkpoint=args.checkpoint,
        seeds=list(range(1, args.runs + 1)),
        n_runs=args.runs,
        sampler=asdict(sampler),
        created={"command": "detect", "scenes": str(args.scenes_file), "run_seed": "SeedSequence(seed, crc32(image_id), run)"},
    )
    save_manifest(out / "manifest.json", manifest)
    summary = {"images": len(scenes), "runs": args.runs, "detections": sum(len(r.detections) for r in runs)}
    _report(args, f"{summary['detections']} detections over {len(scenes)} images x {args.runs} runs\n", summary)


def cmd_accumulate(args, out: Path) -> None:
    dets = load_detections(args.runs_file)
    cfg = NmsConfig(args.iou_thr, args.class_agnostic)
    merged = {}
    for img, runs in sorted(dets.runs().items(), key=lambda kv: str(kv[0])):
        merged[img] = accumulate(runs, cfg, max_dets=args.max_dets).detections
    save_detections(out / "accumulated.json", DetectionFile.from_sets(merged))
    summary = {"images": len(merged), "detections": sum(len(d) for d in merged.values())}
    _report(args, f"{summary['detections']} detections kept over {summary['images']} images\n", summary)


def _ground_truth(ann: AnnotationFile):
    return {k: GroundTruth(b, c) for k, (b, c, _) in ann.ground_truth().items()}


def cmd_eval(args, out: Path) -> None:
    ann = load_annotations(args.annotations)
    gts = _ground_truth(ann)
    found = load_detections(args.detections).sets()
    unknown = set(found) - set(gts)
    if unknown:
        raise MismatchedImageIds(f"detections for images without annotations: {sorted(map(str, unknown))[:5]}")
    dets = {k: found.get(k, DetectionSet()) for k in gts}
    thresholds = (0.5,) if args.map_variant == "50" else EvalConfig().iou_thresholds
    cfg = EvalConfig(iou_thresholds=thresholds, use_buckets=args.buckets, classes=tuple(c.id for c in ann.categories))
    report = evaluate(dets, gts, cfg)
    write_text(out / "report.json", report.to_json() + "\n")
    write_text(out / "report.txt", report.to_text())
    write_text(out / "pr_curves.csv", report.pr_csv())
    _report(args, report.to_text(), report.to_dict())


def _load_regions(path: str) -> VerifiedRegionSet:
    doc = read_json(path, "regions")
    if not isinstance(doc, dict):
        raise ConfigError("regions file must map image ids to lists of [x, y, w, h]")
    regions = {}
    for key, boxes in doc.items():
        img = int(key) if key.lstrip("-").isdigit() else key
        regions[img] = [Box.from_xywh(*map(float, b)) for b in boxes]
    return VerifiedRegionSet(regions)


def cmd_pseudolabel(args, out: Path) -> None:
    ann = load_annotations(args.images)
    images = [ImageRecord(im.id, im.width, im.height) for im in ann.images]
    sets = load_detections(args.detections).sets()
    labels = []
    for im in images:
        if im.id in sets:
            acc = AccumulatedDetections(im.id, args.n_runs, sets[im.id].sorted())
            labels.extend(make_pseudo_labels(acc, args.threshold))
    if args.regions:
        regions = _load_regions(args.regions)
        regions.validate({im.id: (im.width, im.height) for im in images})
        labels = filter_by_regions(labels, regions, args.containment)
    save_annotations(out / "pseudo_labels.json", annotations_from_pseudo_labels(images, labels))
    summary = {"images": len(images), "labels": len(labels)}
    _report(args, f"{len(labels)} pseudo-labels over {len(images)} images\n", summary)


def cmd_finetune(args, out: Path) -> None:
    params, schedule, _ = _model(args.checkpoint)
    cfg = FinetuneConfig(
        labeled_count=args.labeled_count,
        unlabeled_count=args.unlabeled_count,
        test_count=args.test_count,
        seeds=args.seeds,
        steps=args.steps,
        lr=args.lr,
        ema_decay=args.ema_decay,
        threshold=args.threshold,
        n_runs=args.n_runs,
        granularity=args.weight_granularity,
        base_seed=args.seed,
    )
    res = finetune_study(params, schedule, cfg, jobs=args.jobs)
    write_text(out / "finetune.csv", res.table_csv())
    write_text(out / "finetune.json", dump_json(res.to_dict()))
    write_text(out / "finetune.txt", res.table_text())
    _report(args, res.table_text(), res.to_dict())


def cmd_sweep(args, out: Path) -> None:
    params, _, _ = _model(args.checkpoint)
    cfg = SweepConfig(
        domain=args.domain,
        seeds=args.seeds,
        scenes_per_seed=args.scenes_per_seed,
        runs=tuple(args.runs),
        boxes=tuple(args.boxes),
        f_box_sizes=tuple(args.f_box_sizes),
        base_seed=args.seed,
    )
    for b in cfg.boxes:
        if b % cfg.num_boxes:
            raise ConfigError(f"proposal counts must be multiples of {cfg.num_boxes} (one run each), got {b}")
    res = sweep(params, cfg, jobs=args.jobs)
    write_text(out / "table.csv", res.table_csv())
    write_text(out / "table.txt", res.table_text())
    write_text(out / "sweep.json", dump_json(res.to_dict()))
    _report(args, res.table_text(), res.to_dict())


# --- parser ---------------------------------------------------------------------------


def _positive_int(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=os.environ.get(ENV_OUT, "stochdet_out"), help="output directory")
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stochdet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene dataset")
    s.add_argument("--domain", default="source", help="preset name or JSON config path")
    s.add_argument("--scenes", type=_positive_int, default=200)
    s.add_argument("--start", type=int, default=0, help="index of the first scene")
    s.add_argument("--domain-seed", type=int, default=None, help="override the preset's scene seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-toy", parents=[common], help="train the toy denoiser")
    s.add_argument("--scenes-file", help="scenes.json from simulate (default: generate --scenes from --domain)")
    s.add_argument("--domain", default="source")
    s.add_argument("--scenes", type=_positive_int, default=200)
    s.add_argument("--steps", type=int, default=OptimizerConfig.steps)
    s.add_argument("--lr", type=float, default=OptimizerConfig.lr)
    s.add_argument("--batch-size", type=_positive_int, default=OptimizerConfig.batch_size)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("detect", parents=[common], help="sample detector runs")
    s.add_argument("--checkpoint", default=BUNDLED)
    s.add_argument("--scenes-file", required=True)
    s.add_argument("--runs", type=_positive_int, default=1)
    s.add_argument("--boxes", type=_positive_int, default=300)
    s.add_argument("--steps", type=_positive_int, default=10)
    s.add_argument("--f-box-size", type=float, default=1.0)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("accumulate", parents=[common], help="merge runs with NMS")
    s.add_argument("--runs-file", required=True)
    s.add_argument("--iou-thr", type=float, default=0.5)
    s.add_argument("--class-agnostic", action="store_true")
    s.add_argument("--max-dets", type=_positive_int, default=None, help="keep only the top detections per image")
    s.set_defaults(func=cmd_accumulate)

    s = sub.add_parser("eval", parents=[common], help="bucketed mAP")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--buckets", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--map-variant", choices=("coco", "50"), default="coco", help="IoU .50:.95 or .50 only")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pseudolabel", parents=[common], help="threshold detections into weighted labels")
    s.add_argument("--detections", required=True, help="accumulated detection file")
    s.add_argument("--images", required=True, help="annotation file listing the images")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--n-runs", type=_positive_int, default=18, help="runs behind the detections (provenance)")
    s.add_argument("--regions", help='JSON {"image_id": [[x, y, w, h], ...]} of verified regions')
    s.add_argument("--containment", type=float, default=1.0)
    s.set_defaults(func=cmd_pseudolabel)

    s = sub.add_parser("finetune", parents=[common], help="finetuning study with pseudo-labels")
    s.add_argument("--checkpoint", default=BUNDLED)
    s.add_argument("--labeled-count", type=int, choices=(10, 50), default=50)
    s.add_argument("--unlabeled-count", type=_positive_int, default=FinetuneConfig.unlabeled_count)
    s.add_argument("--test-count", type=_positive_int, default=FinetuneConfig.test_count)
    s.add_argument("--weight-granularity", choices=("box", "image"), default="box")
    s.add_argument("--seeds", type=_positive_int, default=5)
    s.add_argument("--steps", type=int, default=FinetuneConfig.steps)
    s.add_argument("--lr", type=float, default=FinetuneConfig.lr)
    s.add_argument("--ema-decay", type=float, default=FinetuneConfig.ema_decay, help="weight averaging; 0 disables")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--n-runs", type=_positive_int, default=18)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("sweep", parents=[common], help="runs / proposals / box-size table")
    s.add_argument("--checkpoint", default=BUNDLED)
    s.add_argument("--domain", default="target")
    s.add_argument("--seeds", type=_positive_int, default=20)
    s.add_argument("--scenes-per-seed", type=_positive_int, default=4)
    s.add_argument("--runs", type=_positive_int, nargs="+", default=[1, 9, 18])
    s.add_argument("--boxes", type=_positive_int, nargs="+", default=[300, 2700, 5400])
    s.add_argument("--f-box-sizes", type=float, nargs="+", default=[1.0, 0.75, 0.5])
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, out)
        _write_metadata(out, args)
    except StochdetError as e:
        print(f"stochdet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
