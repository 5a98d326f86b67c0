"""On-disk formats: annotations, detections, run manifests, scene features and
model checkpoints.

Everything is JSON except the dense scene features, which go to an ``.npz``
sidecar keyed by image id. Boxes are ``[x, y, w, h]`` on disk and corner form
in memory. Unknown fields are kept in ``extra`` and written back unchanged.
NaN and infinities are rejected in both directions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import VOCAB
from .accumulator import DetectionRun
from .boxgeom import Box, xywh_to_xyxy, xyxy_to_xywh
from .diffusion.denoiser import PARAM_NAMES, DenoiserParams
from .diffusion.schedule import NoiseSchedule, cosine_schedule
from .errors import IntegrityError, ParseError, UnknownClass
from .nms import DetectionSet
from .pseudolabel import PseudoLabel

PathLike = Union[str, Path]
CHECKPOINT_FORMAT = "stochdet-checkpoint"
CHECKPOINT_VERSION = 1
BOX_SLACK = 1e-6


# --- JSON helpers -------------------------------------------------------------


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} is not allowed")


def parse_json(text: str, what: str = "document") -> Any:
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ParseError(f"{what}: {e.msg}", line=e.lineno) from None
    except ValueError as e:
        raise ParseError(f"{what}: {e}") from None


def dump_json(obj: Any) -> str:
    """Canonical serialisation: sorted keys, two-space indent, trailing newline."""
    try:
        return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    except ValueError as e:
        raise ParseError(f"refusing to write: {e}") from None


def read_json(path: PathLike, what: Optional[str] = None) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e.strerror}") from None
    return parse_json(text, what or str(path))


def write_text(path: PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _need(d: Mapping, key: str, where: str):
    if not isinstance(d, Mapping):
        raise ParseError(f"{where} must be an object", field=where)
    if key not in d:
        raise ParseError(f"missing field {key!r}", field=f"{where}.{key}")
    return d[key]


def _number(v, where: str, lo: float = -math.inf, hi: float = math.inf) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ParseError(f"expected a finite number, got {v!r}", field=where)
    if not lo <= v <= hi:
        raise ParseError(f"value {v!r} outside [{lo}, {hi}]", field=where)
    return v


def _integer(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"expected an integer, got {v!r}", field=where)
    return v


def _bbox(v, where: str) -> List[float]:
    if not isinstance(v, list) or len(v) != 4:
        raise ParseError("bbox must be a list [x, y, w, h]", field=where)
    x, y, w, h = (_number(c, f"{where}[{i}]") for i, c in enumerate(v))
    if w < 0 or h < 0:
        raise ParseError(f"negative box size {v}", field=where)
    return [x, y, w, h]


def _split(d: Mapping, known: Sequence[str]) -> Dict[str, Any]:
    return {k: v for k, v in d.items() if k not in known}


# --- annotations ----------------------------------------------------------------


@dataclass
class ImageRecord:
    id: Hashable
    width: int
    height: int
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Category:
    id: int
    name: str
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class AnnotationRecord:
    id: int
    image_id: Hashable
    category_id: int
    bbox: List[float]  # x, y, w, h
    weight: Optional[float] = None
    provenance: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def effective_weight(self) -> float:
        return 1.0 if self.weight is None else self.weight


def default_categories() -> List[Category]:
    return [Category(i, name) for i, name in enumerate(VOCAB)]


@dataclass
class AnnotationFile:
    images: List[ImageRecord] = field(default_factory=list)
    annotations: List[AnnotationRecord] = field(default_factory=list)
    categories: List[Category] = field(default_factory=default_categories)
    extra: Dict[str, Any] = field(default_factory=dict)

    def image_index(self) -> Dict[Hashable, ImageRecord]:
        return {im.id: im for im in self.images}

    def validate(self) -> None:
        """Referential integrity and box bounds; raises on the first violation."""
        imgs = {}
        for im in self.images:
            if im.id in imgs:
                raise IntegrityError(f"duplicate image id {im.id!r}")
            imgs[im.id] = im
        cats = {c.id for c in self.categories}
        if len(cats) != len(self.categories):
            raise IntegrityError("duplicate category id")
        seen = set()
        for a in self.annotations:
            if a.id in seen:
                raise IntegrityError(f"duplicate annotation id {a.id}")
            seen.add(a.id)
            if a.image_id not in imgs:
                raise IntegrityError(f"annotation {a.id} references missing image {a.image_id!r}")
            if a.category_id not in cats:
                raise IntegrityError(f"annotation {a.id} references missing category {a.category_id}")
            im = imgs[a.image_id]
            x, y, w, h = a.bbox
            if x < -BOX_SLACK or y < -BOX_SLACK or x + w > im.width + BOX_SLACK or y + h > im.height + BOX_SLACK:
                raise IntegrityError(f"annotation {a.id} lies outside image {a.image_id!r}")
            if a.weight is not None and not 0.0 < a.weight <= 1.0:
                raise IntegrityError(f"annotation {a.id} has weight {a.weight} outside (0, 1]")

    def to_dict(self) -> dict:
        def ann(a: AnnotationRecord) -> dict:
            d = dict(a.extra)
            d.update(id=a.id, image_id=a.image_id, category_id=a.category_id, bbox=list(a.bbox))
            if a.weight is not None:
                d["weight"] = a.weight
            if a.provenance is not None:
                d["provenance"] = a.provenance
            return d

        out = dict(self.extra)
        out["images"] = [{**im.extra, "id": im.id, "width": im.width, "height": im.height} for im in self.images]
        out["annotations"] = [ann(a) for a in self.annotations]
        out["categories"] = [{**c.extra, "id": c.id, "name": c.name} for c in self.categories]
        return out

    @classmethod
    def from_dict(cls, d: Any) -> "AnnotationFile":
        if not isinstance(d, Mapping):
            raise ParseError("annotation file must be a JSON object")
        images = []
        for i, im in enumerate(_need(d, "images", "root")):
            where = f"images[{i}]"
            images.append(
                ImageRecord(
                    _need(im, "id", where),
                    _integer(_need(im, "width", where), f"{where}.width"),
                    _integer(_need(im, "height", where), f"{where}.height"),
                    _split(im, ("id", "width", "height")),
                )
            )
        cats = []
        for i, c in enumerate(d.get("categories", [dict(id=k.id, name=k.name) for k in default_categories()])):
            where = f"categories[{i}]"
            name = _need(c, "name", where)
            if not isinstance(name, str):
                raise ParseError("category name must be a string", field=f"{where}.name")
            cats.append(Category(_integer(_need(c, "id", where), f"{where}.id"), name, _split(c, ("id", "name"))))
        anns = []
        for i, a in enumerate(_need(d, "annotations", "root")):
            where = f"annotations[{i}]"
            weight = a.get("weight") if isinstance(a, Mapping) else None
            if weight is not None:
                weight = _number(weight, f"{where}.weight")
            prov = a.get("provenance") if isinstance(a, Mapping) else None
            if prov is not None and not isinstance(prov, str):
                raise ParseError("provenance must be a string", field=f"{where}.provenance")
            anns.append(
                AnnotationRecord(
                    _integer(_need(a, "id", where), f"{where}.id"),
                    _need(a, "image_id", where),
                    _integer(_need(a, "category_id", where), f"{where}.category_id"),
                    _bbox(_need(a, "bbox", where), f"{where}.bbox"),
                    weight,
                    prov,
                    _split(a, ("id", "image_id", "category_id", "bbox", "weight", "provenance")),
                )
            )
        out = cls(images, anns, cats, _split(d, ("images", "annotations", "categories")))
        out.validate()
        return out

    # conversions

    def ground_truth(self) -> Dict[Hashable, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Per image ``(corner boxes, class ids, weights)``, every image present."""
        out = {im.id: ([], [], []) for im in self.images}
        for a in self.annotations:
            b, c, w = out[a.image_id]
            b.append(a.bbox)
            c.append(a.category_id)
            w.append(a.effective_weight)
        return {
            k: (xywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4)), np.asarray(c, dtype=np.int64), np.asarray(w))
            for k, (b, c, w) in out.items()
        }


def load_annotations(path: PathLike) -> AnnotationFile:
    return AnnotationFile.from_dict(read_json(path))


def save_annotations(path: PathLike, ann: AnnotationFile) -> None:
    ann.validate()
    write_text(path, dump_json(ann.to_dict()))


def annotations_from_scenes(scenes, categories: Optional[List[Category]] = None) -> AnnotationFile:
    images, anns = [], []
    for s in scenes:
        images.append(ImageRecord(s.image_id, int(s.width), int(s.height)))
        for b, c in zip(xyxy_to_xywh(s.boxes), s.class_ids):
            anns.append(AnnotationRecord(len(anns) + 1, s.image_id, int(c), [float(v) for v in b]))
    return AnnotationFile(images, anns, categories or default_categories())


def annotations_from_pseudo_labels(images: Sequence[ImageRecord], labels: Sequence[PseudoLabel]) -> AnnotationFile:
    anns = []
    for lb in labels:
        x, y, w, h = lb.box.to_xywh()
        anns.append(AnnotationRecord(len(anns) + 1, lb.image_id, lb.class_id, [x, y, w, h], lb.weight, lb.provenance))
    return AnnotationFile(list(images), anns)


def pseudo_labels_from_annotations(ann: AnnotationFile) -> List[PseudoLabel]:
    out = []
    for a in ann.annotations:
        out.append(
            PseudoLabel(Box.from_xywh(*a.bbox), a.category_id, a.effective_weight, a.image_id, a.provenance or "annotation")
        )
    return out


# --- detections -------------------------------------------------------------------


@dataclass
class DetectionRecord:
    image_id: Hashable
    category_id: int
    bbox: List[float]
    score: float
    run_index: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class DetectionFile:
    records: List[DetectionRecord] = field(default_factory=list)

    def to_list(self) -> list:
        out = []
        for r in self.records:
            d = dict(r.extra)
            d.update(image_id=r.image_id, category_id=r.category_id, bbox=list(r.bbox), score=r.score)
            if r.run_index is not None:
                d["run_index"] = r.run_index
            out.append(d)
        return out

    @classmethod
    def from_list(cls, items: Any) -> "DetectionFile":
        if not isinstance(items, list):
            raise ParseError("detection file must be a JSON array")
        recs = []
        for i, d in enumerate(items):
            where = f"[{i}]"
            run = d.get("run_index") if isinstance(d, Mapping) else None
            if run is not None and _integer(run, f"{where}.run_index") < 1:
                raise ParseError("run_index must be >= 1", field=f"{where}.run_index")
            recs.append(
                DetectionRecord(
                    _need(d, "image_id", where),
                    _integer(_need(d, "category_id", where), f"{where}.category_id"),
                    _bbox(_need(d, "bbox", where), f"{where}.bbox"),
                    _number(_need(d, "score", where), f"{where}.score", 0.0, 1.0),
                    run,
                    _split(d, ("image_id", "category_id", "bbox", "score", "run_index")),
                )
            )
        return cls(recs)

    @classmethod
    def from_runs(cls, runs: Sequence[DetectionRun]) -> "DetectionFile":
        recs = []
        for run in runs:
            recs.extend(_records(run.image_id, run.detections, run.run_index))
        return cls(recs)

    @classmethod
    def from_sets(cls, dets: Mapping[Hashable, DetectionSet]) -> "DetectionFile":
        recs = []
        for img in sorted(dets, key=str):
            recs.extend(_records(img, dets[img], None))
        return cls(recs)

    def image_ids(self) -> List[Hashable]:
        return sorted({r.image_id for r in self.records}, key=str)

    def runs(self) -> Dict[Hashable, List[DetectionRun]]:
        """Group by image and run index (records without one form run 1)."""
        groups: Dict[Hashable, Dict[int, list]] = {}
        for r in self.records:
            groups.setdefault(r.image_id, {}).setdefault(r.run_index or 1, []).append(r)
        return {
            img: [DetectionRun(img, k, _to_set(recs)) for k, recs in sorted(by_run.items())]
            for img, by_run in groups.items()
        }

    def sets(self) -> Dict[Hashable, DetectionSet]:
        groups: Dict[Hashable, list] = {}
        for r in self.records:
            groups.setdefault(r.image_id, []).append(r)
        return {img: _to_set(recs) for img, recs in groups.items()}


def _records(image_id, dets: DetectionSet, run_index):
    xywh = xyxy_to_xywh(dets.boxes)
    return [
        DetectionRecord(image_id, int(c), [float(v) for v in b], float(s), run_index)
        for b, c, s in zip(xywh, dets.class_ids, dets.scores)
    ]


def _to_set(recs: Sequence[DetectionRecord]) -> DetectionSet:
    if not recs:
        return DetectionSet()
    boxes = xywh_to_xyxy(np.array([r.bbox for r in recs], dtype=np.float64))
    return DetectionSet(boxes, np.array([r.category_id for r in recs]), np.array([r.score for r in recs]))


def load_detections(path: PathLike) -> DetectionFile:
    return DetectionFile.from_list(read_json(path))


def save_detections(path: PathLike, dets: DetectionFile) -> None:
    write_text(path, dump_json(dets.to_list()))


# --- run manifests ------------------------------------------------------------------


@dataclass
class RunManifest:
    checkpoint: str
    seeds: List[int]
    n_runs: int
    sampler: Dict[str, Any] = field(default_factory=dict)
    created: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seeds) != self.n_runs:
            raise IntegrityError(f"manifest declares {self.n_runs} runs but lists {len(self.seeds)} seeds")

    def to_dict(self) -> dict:
        out = dict(self.extra)
        out.update(
            checkpoint=self.checkpoint, seeds=list(self.seeds), n_runs=self.n_runs, sampler=self.sampler, created=self.created
        )
        return out

    @classmethod
    def from_dict(cls, d: Any) -> "RunManifest":
        seeds = _need(d, "seeds", "root")
        if not isinstance(seeds, list):
            raise ParseError("seeds must be a list", field="seeds")
        checkpoint = _need(d, "checkpoint", "root")
        if not isinstance(checkpoint, str):
            raise ParseError("checkpoint must be a string", field="checkpoint")
        return cls(
            checkpoint,
            [_integer(s, f"seeds[{i}]") for i, s in enumerate(seeds)],
            _integer(_need(d, "n_runs", "root"), "n_runs"),
            dict(d.get("sampler", {})),
            dict(d.get("created", {})),
            _split(d, ("checkpoint", "seeds", "n_runs", "sampler", "created")),
        )


def load_manifest(path: PathLike) -> RunManifest:
    return RunManifest.from_dict(read_json(path))


def save_manifest(path: PathLike, m: RunManifest) -> None:
    write_text(path, dump_json(m.to_dict()))


# --- scene datasets -------------------------------------------------------------------


def _feature_key(image_id) -> str:
    return f"image_{image_id}"


def save_scenes(directory: PathLike, scenes, name: str = "scenes", domain: Optional[dict] = None) -> Tuple[Path, Path]:
    """Write ``<name>.json`` (annotations) and ``<name>.npz`` (feature maps)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ann = annotations_from_scenes(scenes)
    if domain is not None:
        ann.extra["domain"] = domain
    ann_path = directory / f"{name}.json"
    feat_path = directory / f"{name}.npz"
    save_annotations(ann_path, ann)
    # fixed member order and no compression timestamps -> stable bytes
    np.savez(feat_path, **{_feature_key(s.image_id): s.features for s in scenes})
    return ann_path, feat_path


def load_scenes(ann_path: PathLike, feat_path: Optional[PathLike] = None):
    from .simworld import Scene

    ann_path = Path(ann_path)
    feat_path = Path(feat_path) if feat_path is not None else ann_path.with_suffix(".npz")
    ann = load_annotations(ann_path)
    try:
        feats = np.load(feat_path)
    except OSError as e:
        raise ParseError(f"cannot read feature file {feat_path}: {e}") from None
    gt = ann.ground_truth()
    scenes = []
    with feats:
        for im in ann.images:
            key = _feature_key(im.id)
            if key not in feats.files:
                raise IntegrityError(f"feature file has no entry for image {im.id!r}")
            boxes, classes, _ = gt[im.id]
            arr = feats[key]
            if not np.all(np.isfinite(arr)):
                raise ParseError(f"non-finite features for image {im.id!r}", field=key)
            scenes.append(Scene(im.id, im.width, im.height, boxes, classes, arr))
    return scenes, ann


# --- checkpoints ---------------------------------------------------------------------


def checkpoint_dict(params: DenoiserParams, schedule: Optional[NoiseSchedule] = None, meta: Optional[dict] = None) -> dict:
    schedule = schedule or cosine_schedule()
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schedule": {"kind": schedule.kind, "T": schedule.T, "alpha_bar": schedule.alpha_bar.tolist()},
        "model": {"n_classes": params.n_classes, "embed_dim": params.embed_dim, "scale": params.scale},
        "shapes": {n: list(a.shape) for n, a in params.arrays()},
        "params": {n: a.ravel().tolist() for n, a in params.arrays()},
        "meta": meta or {},
    }


def save_checkpoint(path: PathLike, params: DenoiserParams, schedule=None, meta=None) -> None:
    if not params.all_finite():
        raise ParseError("refusing to save non-finite parameters")
    write_text(path, dump_json(checkpoint_dict(params, schedule, meta)))


def checkpoint_from_dict(d: Any) -> Tuple[DenoiserParams, NoiseSchedule, dict]:
    if _need(d, "format", "root") != CHECKPOINT_FORMAT:
        raise ParseError("not a model checkpoint", field="format")
    if _need(d, "version", "root") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {d['version']!r}", field="version")
    model = _need(d, "model", "root")
    shapes = _need(d, "shapes", "root")
    flat = _need(d, "params", "root")
    arrays = []
    for n in PARAM_NAMES:
        shape = tuple(_need(shapes, n, "shapes"))
        vals = _need(flat, n, "params")
        if not isinstance(vals, list) or len(vals) != int(np.prod(shape)):
            raise ParseError(f"parameter {n} does not match shape {shape}", field=f"params.{n}")
        arr = np.array([_number(v, f"params.{n}") for v in vals], dtype=np.float64).reshape(shape)
        arrays.append(arr)
    params = DenoiserParams(
        *arrays,
        n_classes=_integer(_need(model, "n_classes", "model"), "model.n_classes"),
        embed_dim=_integer(_need(model, "embed_dim", "model"), "model.embed_dim"),
        scale=float(_number(_need(model, "scale", "model"), "model.scale")),
    )
    sched = _need(d, "schedule", "root")
    schedule = NoiseSchedule(np.asarray(_need(sched, "alpha_bar", "schedule"), dtype=np.float64), sched.get("kind", "custom"))
    return params, schedule, dict(d.get("meta", {}))


def load_checkpoint(path: PathLike) -> Tuple[DenoiserParams, NoiseSchedule, dict]:
    return checkpoint_from_dict(read_json(path, "checkpoint"))


# --- class vocabularies ------------------------------------------------------------------

DEFAULT_MERGES = {"pedestrian": "person"}


@dataclass
class ClassMapReport:
    mapping: Dict[str, str]
    dropped: Dict[str, int]

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def class_map(
    ann: AnnotationFile,
    target_vocab: Sequence[str] = VOCAB,
    merges: Optional[Mapping[str, str]] = None,
) -> Tuple[AnnotationFile, ClassMapReport]:
    """Relabel ``ann`` into ``target_vocab``.

    A source class keeps its name if the target has it, is renamed by
    ``merges`` otherwise, and is dropped (and counted) if neither applies.
    Category ids in the output are positions in ``target_vocab``.
    """
    merges = dict(merges or {})
    source = {c.id: c.name for c in ann.categories}
    names = set(source.values())
    for src, dst in merges.items():
        if src not in names:
            raise UnknownClass(f"merge source {src!r} is not a class of the input")
        if dst not in target_vocab:
            raise UnknownClass(f"merge target {dst!r} is not in the target vocabulary")
    new_id = {name: i for i, name in enumerate(target_vocab)}
    mapping: Dict[str, str] = {}
    for name in source.values():
        if name in merges:
            mapping[name] = merges[name]
        elif name in new_id:
            mapping[name] = name
    dropped: Dict[str, int] = {}
    kept = []
    for a in ann.annotations:
        name = source[a.category_id]
        if name in mapping:
            kept.append(
                AnnotationRecord(a.id, a.image_id, new_id[mapping[name]], list(a.bbox), a.weight, a.provenance, dict(a.extra))
            )
        else:
            dropped[name] = dropped.get(name, 0) + 1
    out = AnnotationFile(
        [ImageRecord(im.id, im.width, im.height, dict(im.extra)) for im in ann.images],
        kept,
        [Category(i, n) for i, n in enumerate(target_vocab)],
        dict(ann.extra),
    )
    return out, ClassMapReport(mapping, dropped)
