"""The bundled desk-scale experiments.

``sweep`` measures how the number of accumulated runs, the proposal count of
a single run and the initial box size change bucketed mAP. ``finetune_study``
compares finetuning on a few labelled target scenes with and without the
various kinds of pseudo-labels. Both are pure functions of their config.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .accumulator import DEFAULT_RUNS, accumulate
from .boxgeom import Box, iou_matrix
from .diffusion.denoiser import DenoiserParams
from .diffusion.sampler import SamplerConfig, reverse_sample, run_seed, sample_runs
from .diffusion.schedule import NoiseSchedule
from .diffusion.training import Annotated, OptimizerConfig
from .errors import ConfigError
from .evaluation import BUCKETS, EvalConfig, evaluate, ground_truth_from_scenes
from .nms import NmsConfig
from .pseudolabel import (
    VerifiedRegionSet,
    filter_by_regions,
    ground_truth_in_regions,
    group_by_image,
    make_pseudo_labels,
    with_unit_weight,
)
from .simworld import DomainConfig, generate_domain, load_preset
from .ssl import finetune, pseudo_item

log = logging.getLogger(__name__)

BUNDLED_MODEL = "source_model.json"
MAX_DETS = 100
EVAL_SCENE_OFFSET = 100_000
LABELED_OFFSET = 200_000
UNLABELED_OFFSET = 300_000
TEST_OFFSET = 400_000


def load_bundled_model() -> Tuple[DenoiserParams, NoiseSchedule, dict]:
    from .dataio import checkpoint_from_dict, parse_json

    text = resources.files("stochdet.data").joinpath(BUNDLED_MODEL).read_text()
    return checkpoint_from_dict(parse_json(text, "bundled checkpoint"))


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``list(map(fn, items))``, optionally across processes; order preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def detect(scene, params, n_runs: int, sampler: SamplerConfig, schedule=None, nms: NmsConfig = NmsConfig()):
    """Accumulated detections of ``n_runs`` runs, capped at the evaluation limit."""
    runs = sample_runs(scene, params, n_runs, sampler, schedule)
    return accumulate(runs, nms, max_dets=MAX_DETS).detections


def paired_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Mean of ``a - b`` and the one-sided paired t-test p-value for a > b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a - b
    if np.all(diff == 0):
        return 0.0, 1.0
    return float(diff.mean()), float(stats.ttest_rel(a, b, alternative="greater").pvalue)


# --- run / proposal / box-size sweep ---------------------------------------------


@dataclass
class SweepConfig:
    domain: str = "target"
    seeds: int = 100
    scenes_per_seed: int = 4
    runs: Tuple[int, ...] = (1, 9, 18)
    boxes: Tuple[int, ...] = (300, 2700, 5400)
    f_box_sizes: Tuple[float, ...] = (1.0, 0.75, 0.5)
    num_boxes: int = 300
    num_steps: int = 10
    base_seed: int = 0

    def columns(self) -> List[Tuple[str, str]]:
        return (
            [("runs", str(n)) for n in self.runs]
            + [("boxes", str(b)) for b in self.boxes]
            + [("f_box_size", f"{f:g}") for f in self.f_box_sizes]
        )


def eval_scenes(domain: DomainConfig, seed: int, k: int):
    return generate_domain(domain, k, start=EVAL_SCENE_OFFSET + seed * k)


def _sweep_seed(args) -> Dict[Tuple[str, str], Dict[str, Optional[float]]]:
    cfg, params, seed = args
    domain = load_preset(cfg.domain)
    scenes = eval_scenes(domain, seed, cfg.scenes_per_seed)
    gts = ground_truth_from_scenes(scenes)
    sampler = SamplerConfig(cfg.num_boxes, cfg.num_steps, 1.0, cfg.base_seed * 1_000_003 + seed)
    n_max = max(cfg.runs)
    runs = {s.image_id: sample_runs(s, params, n_max, sampler) for s in scenes}
    out = {}

    def score(dets):
        return evaluate(dets, gts, EvalConfig(classes=tuple(range(params.n_classes)))).map

    for n in cfg.runs:
        out[("runs", str(n))] = score({i: accumulate(r[:n], max_dets=MAX_DETS).detections for i, r in runs.items()})
    for b in cfg.boxes:
        key = ("boxes", str(b))
        if b == cfg.num_boxes and 1 in cfg.runs:
            out[key] = out[("runs", "1")]
            continue
        dets = {}
        for s in scenes:
            c = SamplerConfig(b, cfg.num_steps, 1.0, run_seed(sampler.seed, s.image_id, 1))
            dets[s.image_id] = accumulate([reverse_sample(s, params, c)], max_dets=MAX_DETS).detections
        out[key] = score(dets)
    for f in cfg.f_box_sizes:
        key = ("f_box_size", f"{f:g}")
        if f == 1.0 and 1 in cfg.runs:
            out[key] = out[("runs", "1")]
            continue
        c = SamplerConfig(cfg.num_boxes, cfg.num_steps, f, sampler.seed)
        out[key] = score({s.image_id: detect(s, params, 1, c) for s in scenes})
    return out


@dataclass
class SweepResult:
    config: SweepConfig
    columns: List[Tuple[str, str]]
    # per_seed[column][bucket] -> list over seeds (None where undefined)
    per_seed: Dict[Tuple[str, str], Dict[str, List[Optional[float]]]]

    def mean(self, column, bucket) -> Optional[float]:
        vals = [v for v in self.per_seed[column][bucket] if v is not None]
        return float(np.mean(vals)) if vals else None

    def paired(self, a, b, bucket) -> Tuple[float, float, int]:
        """(mean difference, one-sided p for a > b, number of usable seeds)."""
        pairs = [
            (x, y)
            for x, y in zip(self.per_seed[a][bucket], self.per_seed[b][bucket])
            if x is not None and y is not None
        ]
        if len(pairs) < 2:
            return 0.0, 1.0, len(pairs)
        x, y = zip(*pairs)
        d, p = paired_test(x, y)
        return d, p, len(pairs)

    def table_csv(self) -> str:
        """Rows are size buckets, columns the three sweeps, cells mean mAP."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket"] + [f"{g}={v}" for g, v in self.columns])
        for b in BUCKETS:
            row = [b]
            for col in self.columns:
                m = self.mean(col, b)
                row.append("" if m is None else f"{m:.4f}")
            w.writerow(row)
        return buf.getvalue()

    def table_text(self) -> str:
        groups = []
        for g, v in self.columns:
            if not groups or groups[-1][0] != g:
                groups.append((g, []))
            groups[-1][1].append(v)
        w = 8

        def row(label, parts):
            return (f"{label:<{w}}" + "".join("| " + "".join(f"{c:<{w}}" for c in cells) for cells in parts)).rstrip()

        widths = [len(vs) for _, vs in groups]
        lines = [row("", [[g] + [""] * (n - 1) for (g, _), n in zip(groups, widths)])]
        lines.append(row("bucket", [[str(v) for v in vs] for _, vs in groups]))
        for b in BUCKETS:
            parts = []
            for g, vs in groups:
                means = (self.mean((g, v), b) for v in vs)
                parts.append(["-" if m is None else f"{m:.4f}" for m in means])
            lines.append(row(b, parts))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "columns": [f"{g}={v}" for g, v in self.columns],
            "mean": {f"{g}={v}": {b: self.mean((g, v), b) for b in BUCKETS} for g, v in self.columns},
            "per_seed": {f"{g}={v}": self.per_seed[(g, v)] for g, v in self.columns},
        }


def sweep(params: DenoiserParams, cfg: SweepConfig = SweepConfig(), jobs: int = 1) -> SweepResult:
    per = parallel_map(_sweep_seed, [(cfg, params, s) for s in range(cfg.seeds)], jobs)
    cols = cfg.columns()
    per_seed = {c: {b: [p[c][b] for p in per] for b in BUCKETS} for c in cols}
    return SweepResult(cfg, cols, per_seed)


# --- finetuning with pseudo-labels ------------------------------------------------

CONDITIONS = (
    "baseline",
    "single_run_pseudo",
    "accumulated_pseudo",
    "verified_pseudo",
    "verified_gt",
    "weighted_unverified",
)


@dataclass
class FinetuneConfig:
    domain: str = "target"
    labeled_count: int = 50
    unlabeled_count: int = 100
    test_count: int = 30
    seeds: int = 5
    steps: int = 300
    lr: float = 1e-3
    ema_decay: float = 0.98
    batch_size: int = 8
    threshold: float = 0.5
    n_runs: int = DEFAULT_RUNS
    granularity: str = "box"
    containment: float = 1.0
    region_margin: float = 0.1
    conditions: Tuple[str, ...] = CONDITIONS
    base_seed: int = 0


def synthesize_regions(scenes, detections, threshold: float, margin: float) -> VerifiedRegionSet:
    """Stand-in for an annotator marking good areas.

    Every confident detection that agrees with a ground-truth box of the same
    class (IoU >= 0.5) yields a region around the pair, grown by ``margin``
    of its size and clipped to the image.
    """
    regions: Dict = {}
    for s in scenes:
        d = detections[s.image_id]
        sel = d.scores > threshold
        boxes, classes = d.boxes[sel], d.class_ids[sel]
        out = []
        if len(boxes) and len(s.boxes):
            ious = iou_matrix(boxes, s.boxes)
            same = classes[:, None] == s.class_ids[None, :]
            ious = np.where(same, ious, 0.0)
            for i in np.flatnonzero(ious.max(axis=1) >= 0.5):
                g = s.boxes[ious[i].argmax()]
                lo = np.minimum(boxes[i, :2], g[:2])
                hi = np.maximum(boxes[i, 2:], g[2:])
                pad = margin * (hi - lo)
                lo = np.maximum(lo - pad, 0.0)
                hi = np.minimum(hi + pad, [s.width, s.height])
                out.append(Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])))
        regions[s.image_id] = out
    return VerifiedRegionSet(regions)


def _pseudo_sets(cfg: FinetuneConfig, params, unlabeled) -> Dict[str, List[Annotated]]:
    sampler = SamplerConfig(seed=cfg.base_seed * 1_000_003 + 17)
    n = cfg.n_runs
    acc_n, acc_1 = {}, {}
    for s in unlabeled:
        runs = sample_runs(s, params, n, sampler)
        acc_n[s.image_id] = accumulate(runs)
        acc_1[s.image_id] = accumulate(runs[:1])
    regions = synthesize_regions(
        unlabeled, {k: a.detections for k, a in acc_n.items()}, cfg.threshold, cfg.region_margin
    )
    labels_n = {k: make_pseudo_labels(a, cfg.threshold) for k, a in acc_n.items()}
    labels_1 = {k: make_pseudo_labels(a, cfg.threshold) for k, a in acc_1.items()}
    verified = group_by_image(
        filter_by_regions([lb for s in unlabeled for lb in labels_n[s.image_id]], regions, cfg.containment)
    )
    gt_in = group_by_image(ground_truth_in_regions(ground_truth_from_scenes(unlabeled), regions, cfg.containment))

    def items(per_image, weighted=True):
        out = []
        for s in unlabeled:
            lbs = per_image.get(s.image_id, [])
            if lbs:
                out.append(pseudo_item(s, lbs if weighted else with_unit_weight(lbs)))
        return out

    return {
        "baseline": [],
        "single_run_pseudo": items(labels_1, weighted=False),
        "accumulated_pseudo": items(labels_n, weighted=False),
        "verified_pseudo": items(verified, weighted=False),
        "verified_gt": items(gt_in),
        "weighted_unverified": items(labels_n),
    }


def score_model(params, scenes, sampler_seed: int) -> Dict[str, Optional[float]]:
    """Bucketed mAP of a single run (with NMS) per scene."""
    gts = ground_truth_from_scenes(scenes)
    dets = {s.image_id: detect(s, params, 1, SamplerConfig(seed=sampler_seed)) for s in scenes}
    return evaluate(dets, gts, EvalConfig(classes=tuple(range(params.n_classes)))).map


@dataclass
class FinetuneResult:
    config: FinetuneConfig
    source: Dict[str, Optional[float]]
    # scores[condition] -> list over seeds of bucketed mAP
    scores: Dict[str, List[Dict[str, Optional[float]]]]
    label_counts: Dict[str, int]

    def mean(self, condition: str, bucket: str = "all") -> float:
        vals = [s[bucket] for s in self.scores[condition] if s[bucket] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(next(iter(self.scores.values())))
        w.writerow(["condition", "labels", "mean_map"] + [f"seed_{i}" for i in range(n)])
        for c, per in self.scores.items():
            w.writerow([c, self.label_counts[c], f"{self.mean(c):.4f}"] + [f"{s['all']:.4f}" for s in per])
        return buf.getvalue()

    def table_text(self) -> str:
        lines = [f"{'condition':<22} {'labels':>7} {'mAP':>7}", f"{'source model':<22} {'-':>7} {self.source['all']:>7.4f}"]
        for c in self.scores:
            lines.append(f"{c:<22} {self.label_counts[c]:>7} {self.mean(c):>7.4f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "source_model": self.source,
            "label_counts": self.label_counts,
            "mean": {c: self.mean(c) for c in self.scores},
            "per_seed": self.scores,
        }


def _finetune_seed(args):
    cfg, params, schedule, pseudo, seed = args
    domain = load_preset(cfg.domain)
    labeled = generate_domain(domain, cfg.labeled_count, start=LABELED_OFFSET + seed * cfg.labeled_count)
    test = generate_domain(domain, cfg.test_count, start=TEST_OFFSET)
    opt = OptimizerConfig(
        steps=cfg.steps,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        seed=cfg.base_seed * 1_000_003 + seed,
        ema_decay=cfg.ema_decay,
    )
    out = {}
    for c in cfg.conditions:
        tuned, _ = finetune(params, labeled, pseudo[c], schedule, opt, cfg.granularity)
        out[c] = score_model(tuned, test, sampler_seed=seed)
    return out


def finetune_study(params, schedule, cfg: FinetuneConfig = FinetuneConfig(), jobs: int = 1) -> FinetuneResult:
    unknown = set(cfg.conditions) - set(CONDITIONS)
    if unknown:
        raise ConfigError(f"unknown conditions {sorted(unknown)}")
    domain = load_preset(cfg.domain)
    unlabeled = generate_domain(domain, cfg.unlabeled_count, start=UNLABELED_OFFSET)
    pseudo = _pseudo_sets(cfg, params, unlabeled)
    test = generate_domain(domain, cfg.test_count, start=TEST_OFFSET)
    source = score_model(params, test, sampler_seed=0)
    per = parallel_map(_finetune_seed, [(cfg, params, schedule, pseudo, s) for s in range(cfg.seeds)], jobs)
    scores = {c: [p[c] for p in per] for c in cfg.conditions}
    counts = {c: int(sum(len(it.boxes) for it in pseudo[c])) for c in cfg.conditions}
    return FinetuneResult(cfg, source, scores, counts)
