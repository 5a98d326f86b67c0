"""Stochastic accumulation: concatenate several detector runs and suppress.

Each run of a diffusion detector starts from a fresh draw of random boxes, so
runs disagree slightly. ``accumulate`` pools the runs row-wise and applies
greedy NMS once; surviving detections keep the confidence of the run that
produced them (no score averaging).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import EmptyRuns, MixedImages
from .nms import DetectionSet, NmsConfig, greedy_suppress as _greedy

DEFAULT_RUNS = 18


@dataclass
class DetectionRun:
    image_id: Hashable
    run_index: int
    detections: DetectionSet = field(default_factory=DetectionSet)

    def __post_init__(self):
        if self.run_index < 1:
            raise ValueError(f"run_index must be >= 1, got {self.run_index}")
        if not isinstance(self.detections, DetectionSet):
            self.detections = DetectionSet.from_detections(self.detections)


@dataclass
class AccumulatedDetections:
    image_id: Hashable
    n_runs: int
    detections: DetectionSet


def _check_runs(runs: Sequence[DetectionRun]):
    if not runs:
        raise EmptyRuns("accumulate needs at least one run")
    ids = {r.image_id for r in runs}
    if len(ids) > 1:
        raise MixedImages(f"runs belong to different images: {sorted(map(str, ids))}")


def _priority(scores: np.ndarray, run_idx: np.ndarray, seq: np.ndarray) -> np.ndarray:
    # descending score, then ascending run index, then arrival order
    return np.lexsort((seq, run_idx, -scores))


def accumulate(
    runs: Sequence[DetectionRun], cfg: NmsConfig = NmsConfig(), max_dets: Optional[int] = None
) -> AccumulatedDetections:
    """NMS over the row-wise concatenation of ``runs``.

    Runs are concatenated in ``run_index`` order before the (stable)
    confidence sort, so the result does not depend on the order in which the
    runs were produced unless confidences tie exactly. ``max_dets`` returns
    only the most confident survivors; these are identical to the head of the
    full result but much cheaper to find.
    """
    runs = list(runs)
    _check_runs(runs)
    ordered = sorted(runs, key=lambda r: r.run_index)
    pooled = DetectionSet.concat([r.detections for r in ordered])
    run_idx = np.concatenate([np.full(len(r.detections), r.run_index) for r in ordered])
    order = _priority(pooled.scores, run_idx, np.arange(len(pooled)))
    kept, _ = _greedy(pooled.boxes, pooled.class_ids, order, cfg.iou_threshold, cfg.class_agnostic, max_dets)
    keep = order[kept[order]][:max_dets]
    return AccumulatedDetections(ordered[0].image_id, len(runs), pooled[keep])


RunSource = Union[Iterable[DetectionRun], Callable[[int], DetectionRun]]


def accumulate_streaming(
    source: RunSource, n: int, cfg: NmsConfig = NmsConfig(), exact: bool = True
) -> AccumulatedDetections:
    """Fold ``n`` runs into a running NMS result one at a time.

    ``source`` is an iterable of runs or a callable ``i -> run`` for
    ``i = 1..n``. After each merge the pooled set is re-suppressed.

    With ``exact=True`` every suppressed detection is remembered together with
    the kept detection that suppressed it; if a later run knocks out that
    owner, its suppressed detections are put back into contention. The result
    then equals :func:`accumulate` on the materialised runs. With
    ``exact=False`` suppressed detections are dropped after each merge, which
    bounds memory by the kept set but can differ from the batch result when a
    late, more confident box removes an earlier winner.
    """
    if n < 1:
        raise EmptyRuns("accumulate_streaming needs n >= 1")
    if callable(source):
        produce = (source(i) for i in range(1, n + 1))
    else:
        produce = iter(source)

    boxes = np.zeros((0, 4))
    classes = np.zeros(0, dtype=np.int64)
    scores = np.zeros(0)
    run_idx = np.zeros(0, dtype=np.int64)
    seq = np.zeros(0, dtype=np.int64)
    kept = np.zeros(0, dtype=bool)
    owner = np.zeros(0, dtype=np.int64)
    image_id = None
    counter = 0
    thr, agnostic = cfg.iou_threshold, cfg.class_agnostic

    for _ in range(n):
        run = next(produce)
        if image_id is None:
            image_id = run.image_id
        elif run.image_id != image_id:
            raise MixedImages(f"runs belong to different images: {image_id!r} and {run.image_id!r}")
        d = run.detections
        m = len(d)
        boxes = np.concatenate([boxes, d.boxes])
        classes = np.concatenate([classes, d.class_ids])
        scores = np.concatenate([scores, d.scores])
        run_idx = np.concatenate([run_idx, np.full(m, run.run_index, dtype=np.int64)])
        seq = np.concatenate([seq, counter + np.arange(m)])
        counter += m
        kept = np.concatenate([kept, np.ones(m, dtype=bool)])
        owner = np.concatenate([owner, np.full(m, -1, dtype=np.int64)])

        candidate = kept.copy()
        while True:
            idx = np.flatnonzero(candidate)
            order = idx[_priority(scores[idx], run_idx[idx], seq[idx])]
            k, o = _greedy(boxes, classes, order, thr, agnostic)
            lost = np.flatnonzero(candidate & ~k)
            revive = (~candidate) & np.isin(owner, lost)
            if not revive.any():
                break
            candidate |= revive
        owner = np.where(candidate, o, owner)
        kept = k

        if not exact:
            live = kept
            boxes, classes, scores = boxes[live], classes[live], scores[live]
            run_idx, seq, kept = run_idx[live], seq[live], kept[live]
            owner = np.full(len(scores), -1, dtype=np.int64)

    idx = np.flatnonzero(kept)
    order = idx[_priority(scores[idx], run_idx[idx], seq[idx])]
    out = DetectionSet(boxes[order], classes[order], scores[order])
    return AccumulatedDetections(image_id, n, out)
