"""Detections and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .boxgeom import Box, as_array, iou_matrix


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.5
    class_agnostic: bool = False

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")


@dataclass
class DetectionSet:
    """Column-oriented detections: ``boxes [N, 4]``, ``class_ids [N]``, ``scores [N]``.

    Iterating yields :class:`Detection` values; indexing with an integer array
    or boolean mask yields a new ``DetectionSet``.
    """

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.boxes = as_array(self.boxes)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        if len(self.class_ids) != n or len(self.scores) != n:
            raise ValueError("boxes, class_ids and scores must have equal length")

    @classmethod
    def from_detections(cls, dets: Iterable[Detection]) -> "DetectionSet":
        dets = list(dets)
        if not dets:
            return cls()
        return cls(
            np.array([d.box.as_tuple() for d in dets]),
            np.array([d.class_id for d in dets]),
            np.array([d.confidence for d in dets]),
        )

    @classmethod
    def concat(cls, parts: Sequence["DetectionSet"]) -> "DetectionSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.class_ids for p in parts]),
            np.concatenate([p.scores for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[Detection]:
        for b, c, s in zip(self.boxes, self.class_ids, self.scores):
            yield Detection(Box(*map(float, b)), int(c), float(s))

    def __getitem__(self, idx) -> "DetectionSet":
        if not isinstance(idx, slice):
            idx = np.asarray(idx)
            if idx.ndim == 0:
                idx = idx.reshape(1)
        return DetectionSet(self.boxes[idx], self.class_ids[idx], self.scores[idx])

    def to_list(self) -> List[Detection]:
        return list(self)

    def sorted(self) -> "DetectionSet":
        """Descending confidence; ties keep their current order."""
        return self[descending_order(self.scores)]

    def top(self, k: int) -> "DetectionSet":
        """The ``k`` most confident detections, most confident first."""
        return self[descending_order(self.scores)[: max(k, 0)]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DetectionSet):
            return NotImplemented
        return (
            np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.scores, other.scores)
        )


def descending_order(scores: np.ndarray) -> np.ndarray:
    # stable: equal scores keep input order
    return np.argsort(-np.asarray(scores), kind="stable")


def greedy_suppress(
    boxes: np.ndarray,
    class_ids: np.ndarray,
    order: np.ndarray,
    iou_threshold: float,
    class_agnostic: bool = False,
    max_keep: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy NMS visiting detections in ``order``.

    Returns ``(kept, owner)`` over the input positions: ``owner[j]`` is the
    kept detection that removed ``j``, or -1. A detection's fate depends only
    on those visited before it, so with ``max_keep`` each class stops after
    that many keeps and the first ``max_keep`` survivors are still exact;
    unvisited detections are reported as neither kept nor owned.
    """
    n = len(boxes)
    kept = np.zeros(n, dtype=bool)
    owner = np.full(n, -1, dtype=np.int64)
    order = np.asarray(order, dtype=np.int64)
    if n == 0:
        return kept, owner
    class_ids = np.asarray(class_ids)
    groups = [order] if class_agnostic else [order[class_ids[order] == c] for c in np.unique(class_ids[order])]
    limit = n if max_keep is None else max_keep
    for live in groups:
        n_kept = 0
        while len(live) and n_kept < limit:
            i = live[0]
            kept[i] = True
            n_kept += 1
            rest = live[1:]
            hit = iou_matrix(boxes[i : i + 1], boxes[rest])[0] >= iou_threshold
            owner[rest[hit]] = i
            live = rest[~hit]
    return kept, owner


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    class_ids: np.ndarray,
    iou_threshold: float = 0.5,
    class_agnostic: bool = False,
) -> np.ndarray:
    """Indices of kept detections in descending-confidence order."""
    boxes = as_array(boxes)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = descending_order(scores)
    kept, _ = greedy_suppress(boxes, class_ids, order, iou_threshold, class_agnostic)
    return order[kept[order]]


def nms(
    dets: Union[DetectionSet, Sequence[Detection]], cfg: NmsConfig = NmsConfig()
) -> Union[DetectionSet, List[Detection]]:
    """Greedy NMS.

    Detections are visited by descending confidence; each one kept removes every
    later detection of the same class (any class when ``cfg.class_agnostic``)
    whose IoU with it is at least ``cfg.iou_threshold``. Returns the same
    container type it was given, in descending-confidence order, with boxes
    untouched.
    """
    as_list = not isinstance(dets, DetectionSet)
    ds = DetectionSet.from_detections(dets) if as_list else dets
    keep = nms_indices(ds.boxes, ds.scores, ds.class_ids, cfg.iou_threshold, cfg.class_agnostic)
    out = ds[keep]
    return out.to_list() if as_list else out
