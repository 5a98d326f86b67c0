"""Confidence-weighted pseudo-labels and verified-region filtering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .accumulator import AccumulatedDetections
from .boxgeom import Box, area
from .errors import ConfigError

DEFAULT_THRESHOLD = 0.5
SINGLE_RUN = "single_run"
GROUND_TRUTH = "ground_truth"


def accumulated(n: int) -> str:
    return f"accumulated({n})"


@dataclass(frozen=True)
class PseudoLabel:
    box: Box
    class_id: int
    weight: float
    image_id: Hashable
    provenance: str = SINGLE_RUN

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"pseudo-label weight must lie in (0, 1], got {self.weight}")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass
class VerifiedRegionSet:
    """Per-image lists of regions an annotator marked as correctly labelled."""

    regions: Dict[Hashable, List[Box]] = field(default_factory=dict)

    def get(self, image_id) -> List[Box]:
        return self.regions.get(image_id, [])

    def validate(self, sizes: Mapping[Hashable, Tuple[float, float]]) -> None:
        for img, boxes in self.regions.items():
            if img not in sizes:
                raise ConfigError(f"regions given for unknown image {img!r}")
            W, H = sizes[img]
            for b in boxes:
                if b.x_min < 0 or b.y_min < 0 or b.x_max > W or b.y_max > H:
                    raise ConfigError(f"region {b} lies outside image {img!r}")


def make_pseudo_labels(acc: AccumulatedDetections, threshold: float = DEFAULT_THRESHOLD) -> List[PseudoLabel]:
    """Detections with confidence strictly above ``threshold``, weighted by
    their confidence."""
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"threshold must lie in [0, 1), got {threshold}")
    prov = SINGLE_RUN if acc.n_runs == 1 else accumulated(acc.n_runs)
    return [
        PseudoLabel(d.box, d.class_id, d.confidence, acc.image_id, prov)
        for d in acc.detections
        if d.confidence > threshold
    ]


def _intersection(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(w, 0.0) * max(h, 0.0)


def inside_regions(box: Box, regions: Sequence[Box], containment: float) -> bool:
    """True if one region covers at least ``containment`` of the box area."""
    need = containment * area(box)
    return any(_intersection(box, r) >= need for r in regions)


def _check_containment(containment: float) -> None:
    if not 0.0 < containment <= 1.0:
        raise ConfigError(f"containment must lie in (0, 1], got {containment}")


def filter_by_regions(
    labels: Iterable[PseudoLabel], regions: VerifiedRegionSet, containment: float = 1.0
) -> List[PseudoLabel]:
    _check_containment(containment)
    return [lb for lb in labels if inside_regions(lb.box, regions.get(lb.image_id), containment)]


def ground_truth_in_regions(gts, regions: VerifiedRegionSet, containment: float = 1.0) -> List[PseudoLabel]:
    """Ground-truth boxes inside verified regions, as weight-1 labels.

    ``gts`` maps image id to an object with ``boxes`` (corner form) and
    ``class_ids``.
    """
    _check_containment(containment)
    out = []
    for img in sorted(gts, key=str):
        g = gts[img]
        for b, c in zip(np.asarray(g.boxes, dtype=float).reshape(-1, 4), g.class_ids):
            box = Box(*map(float, b))
            if inside_regions(box, regions.get(img), containment):
                out.append(PseudoLabel(box, int(c), 1.0, img, GROUND_TRUTH))
    return out


def group_by_image(labels: Iterable[PseudoLabel]) -> Dict[Hashable, List[PseudoLabel]]:
    out: Dict[Hashable, List[PseudoLabel]] = {}
    for lb in labels:
        out.setdefault(lb.image_id, []).append(lb)
    return out


def with_unit_weight(labels: Iterable[PseudoLabel]) -> List[PseudoLabel]:
    """Same labels, each with weight 1 (the unweighted variants)."""
    return [PseudoLabel(lb.box, lb.class_id, 1.0, lb.image_id, lb.provenance) for lb in labels]


def label_arrays(labels: Sequence[PseudoLabel]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(boxes [k, 4], class_ids [k], weights [k])`` for one image's labels."""
    if not labels:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0)
    boxes = np.array([lb.box.as_tuple() for lb in labels], dtype=np.float64)
    classes = np.array([lb.class_id for lb in labels], dtype=np.int64)
    weights = np.array([lb.weight for lb in labels], dtype=np.float64)
    return boxes, classes, weights
