"""Axis-aligned boxes, overlap measures and COCO-style size buckets.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)`` in pixel
coordinates. The array helpers take ``[N, 4]`` float arrays in the same layout
and are what the hot paths (NMS, evaluation, sampling) use.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

SMALL_MAX_AREA = 32.0**2
MEDIUM_MAX_AREA = 96.0**2
DEFAULT_THRESHOLDS = (SMALL_MAX_AREA, MEDIUM_MAX_AREA)


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {coords}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min)


class SizeBucket(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2


def area(b: Box) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def bucket_of_area(a: float, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> SizeBucket:
    small, medium = thresholds
    if a < small:
        return SizeBucket.SMALL
    if a < medium:
        return SizeBucket.MEDIUM
    return SizeBucket.LARGE


def bucket(b: Box, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> SizeBucket:
    return bucket_of_area(area(b), thresholds)


# --- array forms -----------------------------------------------------------


def as_array(boxes) -> np.ndarray:
    """Coerce a sequence of ``Box`` or an ``[N, 4]`` array-like to float64 ``[N, 4]``."""
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], Box):
            arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def areas(boxes: np.ndarray) -> np.ndarray:
    boxes = as_array(boxes)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``[len(a), len(b)]``; zero-union pairs give 0."""
    a = as_array(a)
    b = as_array(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def buckets_of(boxes: np.ndarray, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """Vectorised ``bucket``: int array of ``SizeBucket`` values."""
    a = areas(boxes)
    small, medium = thresholds
    return np.where(a < small, 0, np.where(a < medium, 1, 2)).astype(np.int64)


def xyxy_to_xywh(boxes: np.ndarray) -> np.ndarray:
    boxes = as_array(boxes)
    return np.stack([boxes[:, 0], boxes[:, 1], boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]], axis=1)


def xywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = as_array(boxes)
    return np.stack([boxes[:, 0], boxes[:, 1], boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3]], axis=1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = as_array(boxes)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([boxes[:, 0] + w / 2, boxes[:, 1] + h / 2, w, h], axis=1)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = as_array(boxes)
    half_w = boxes[:, 2] / 2
    half_h = boxes[:, 3] / 2
    return np.stack(
        [boxes[:, 0] - half_w, boxes[:, 1] - half_h, boxes[:, 0] + half_w, boxes[:, 1] + half_h], axis=1
    )


def clip_to_image(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = as_array(boxes).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
    return boxes
