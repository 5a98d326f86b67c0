"""Synthetic scenes with a controllable source/target domain gap.

A scene is a set of labelled boxes plus a dense feature map standing in for a
backbone's output. The map has one "mass" channel per class (a Gaussian bump
per object, scaled by the object's detectability) and four channels holding
the normalised ``(cx, cy, w, h)`` of whichever object dominates each cell. Phantom
bumps (clutter that belongs to no object) and white noise make detection
genuinely ambiguous.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import VOCAB
from .boxgeom import Box, SizeBucket, areas, buckets_of
from .errors import ConfigError, EmptyInput

N_MOMENTS = 4


@dataclass
class DomainConfig:
    name: str
    image_size: Tuple[int, int] = (512, 512)
    objects_mean: float = 5.0
    objects_min: int = 1
    objects_max: int = 30
    class_probs: Sequence[float] = (0.25, 0.25, 0.25, 0.25)
    # median linear size sqrt(w*h) in pixels, per class
    size_median: Sequence[float] = (60.0, 80.0, 160.0, 140.0)
    size_spread: float = 0.4
    aspect_median: Sequence[float] = (0.45, 1.6, 1.8, 1.5)
    aspect_spread: float = 0.15
    # detectability ~ Beta(a, b) scales each object's feature mass
    detectability: Tuple[float, float] = (8.0, 2.0)
    phantoms_mean: float = 0.5
    phantom_detectability: Tuple[float, float] = (3.0, 4.0)
    clutter: float = 0.03
    kernel_scale: float = 0.35
    grid: int = 64
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.detectability = tuple(self.detectability)
        self.phantom_detectability = tuple(self.phantom_detectability)
        positives = [
            *self.size_median,
            *self.aspect_median,
            *self.detectability,
            *self.phantom_detectability,
            self.size_spread,
            self.kernel_scale,
        ]
        if any(v <= 0 for v in positives):
            raise ConfigError(f"domain {self.name!r}: size/aspect/detectability parameters must be positive")
        if len(self.class_probs) != len(self.size_median) or len(self.size_median) != len(self.aspect_median):
            raise ConfigError(f"domain {self.name!r}: per-class parameter lengths differ")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ConfigError(f"domain {self.name!r}: bad object count range")
        if self.clutter < 0 or self.phantoms_mean < 0 or self.grid < 2:
            raise ConfigError(f"domain {self.name!r}: clutter, phantoms and grid must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.class_probs)

    @property
    def n_channels(self) -> int:
        return self.n_classes + N_MOMENTS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown domain config keys: {sorted(unknown)}")
        return cls(**d)


def load_preset(name: str, **overrides) -> DomainConfig:
    """Bundled ``source`` / ``target`` presets, or a path to a JSON config."""
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        data = json.loads(path.read_text())
    else:
        try:
            text = resources.files("stochdet.presets").joinpath(f"{name}.json").read_text()
        except FileNotFoundError:
            raise ConfigError(f"no domain preset named {name!r}") from None
        data = json.loads(text)
    data.update(overrides)
    return DomainConfig.from_dict(data)


@dataclass
class Scene:
    image_id: int
    width: int
    height: int
    boxes: np.ndarray  # [k, 4] corner form, pixels
    class_ids: np.ndarray  # [k]
    features: np.ndarray = field(repr=False, default=None)  # [G, G, C + 4]

    @property
    def objects(self) -> List[Tuple[Box, int]]:
        return [(Box(*map(float, b)), int(c)) for b, c in zip(self.boxes, self.class_ids)]

    @property
    def feature_vector(self) -> np.ndarray:
        return self.features.reshape(-1)


def _draw_objects(rng, cfg: DomainConfig, n: int, classes=None):
    W, H = cfg.image_size
    if classes is None:
        classes = rng.choice(cfg.n_classes, size=n, p=np.asarray(cfg.class_probs) / np.sum(cfg.class_probs))
    med = np.asarray(cfg.size_median, dtype=float)[classes]
    asp = np.asarray(cfg.aspect_median, dtype=float)[classes]
    size = med * np.exp(cfg.size_spread * rng.standard_normal(n))
    aspect = asp * np.exp(cfg.aspect_spread * rng.standard_normal(n))
    w = np.clip(size * np.sqrt(aspect), 2.0, 0.9 * W)
    h = np.clip(size / np.sqrt(aspect), 2.0, 0.9 * H)
    cx = w / 2 + rng.uniform(0, 1, n) * (W - w)
    cy = h / 2 + rng.uniform(0, 1, n) * (H - h)
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return boxes, classes.astype(np.int64)


def render_features(
    cfg: DomainConfig,
    boxes: np.ndarray,
    classes: np.ndarray,
    strength: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Dense ``[G, G, C + 4]`` map for objects with per-object ``strength``."""
    W, H = cfg.image_size
    G = cfg.grid
    C = cfg.n_classes
    centers = (np.arange(G) + 0.5) / G
    fmap = np.zeros((G, G, C + N_MOMENTS))
    if len(boxes):
        u = np.stack(
            [
                (boxes[:, 0] + boxes[:, 2]) / 2 / W,
                (boxes[:, 1] + boxes[:, 3]) / 2 / H,
                (boxes[:, 2] - boxes[:, 0]) / W,
                (boxes[:, 3] - boxes[:, 1]) / H,
            ],
            axis=1,
        )
        floor = 0.5 / G
        sx = cfg.kernel_scale * u[:, 2] + floor
        sy = cfg.kernel_scale * u[:, 3] + floor
        kx = np.exp(-0.5 * ((centers[None, :] - u[:, 0:1]) / sx[:, None]) ** 2)  # [k, G]
        ky = np.exp(-0.5 * ((centers[None, :] - u[:, 1:2]) / sy[:, None]) ** 2)
        mass = strength[:, None, None] * ky[:, :, None] * kx[:, None, :]  # [k, G(y), G(x)]
        for c in range(C):
            sel = classes == c
            if sel.any():
                fmap[:, :, c] = mass[sel].sum(axis=0)
        # box parameters of the locally dominant object
        fmap[:, :, C:] = u[mass.argmax(axis=0)]
    if rng is not None and cfg.clutter > 0:
        fmap[:, :, :C] += cfg.clutter * rng.standard_normal((G, G, C))
    return fmap


def generate_scene(cfg: DomainConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    W, H = cfg.image_size
    n = int(np.clip(cfg.objects_min + rng.poisson(max(cfg.objects_mean - cfg.objects_min, 0.0)), cfg.objects_min, cfg.objects_max))
    boxes, classes = _draw_objects(rng, cfg, n)
    strength = rng.beta(*cfg.detectability, size=n)
    n_ph = int(rng.poisson(cfg.phantoms_mean))
    ph_boxes, ph_classes = _draw_objects(rng, cfg, n_ph)
    ph_strength = rng.beta(*cfg.phantom_detectability, size=n_ph)
    fmap = render_features(
        cfg,
        np.concatenate([boxes, ph_boxes]),
        np.concatenate([classes, ph_classes]),
        np.concatenate([strength, ph_strength]),
        rng,
    )
    return Scene(index, W, H, boxes, classes, fmap)


def generate_domain(cfg: DomainConfig, n_scenes: int, start: int = 0) -> List[Scene]:
    """``n_scenes`` scenes; scene ``i`` depends only on ``(cfg, i)``."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    return [generate_scene(cfg, start + i) for i in range(n_scenes)]


@dataclass
class SizeHistogram:
    counts: Dict[SizeBucket, int]
    areas: np.ndarray
    bin_edges: np.ndarray
    bin_counts: np.ndarray

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def median_area(self) -> float:
        return float(np.median(self.areas)) if len(self.areas) else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "label", "lo", "hi", "count"])
        for b in SizeBucket:
            w.writerow(["bucket", b.name.lower(), "", "", self.counts[b]])
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.bin_counts):
            w.writerow(["bin", "", f"{lo:.6g}", f"{hi:.6g}", int(c)])
        return buf.getvalue()


def size_histogram(scenes: Sequence[Scene], bins: Optional[np.ndarray] = None) -> SizeHistogram:
    """Bucket counts and a log-spaced area histogram of the ground truth."""
    if not scenes:
        raise EmptyInput("size_histogram needs at least one scene")
    all_boxes = np.concatenate([s.boxes for s in scenes]) if scenes else np.zeros((0, 4))
    a = areas(all_boxes)
    b = buckets_of(all_boxes)
    counts = {k: int(np.sum(b == k)) for k in SizeBucket}
    if bins is None:
        bins = np.geomspace(4.0, 512.0**2, 33)
    hist, edges = np.histogram(np.clip(a, bins[0], bins[-1]), bins=bins)
    return SizeHistogram(counts, a, edges, hist)


def class_names(cfg: DomainConfig) -> Tuple[str, ...]:
    return VOCAB[: cfg.n_classes]
