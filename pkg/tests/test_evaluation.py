import numpy as np
import pytest

from oracles import interpolated_ap, reference_map
from stochdet.errors import ConfigError, MismatchedImageIds
from stochdet.evaluation import (
    COCO_IOUS,
    EvalConfig,
    GroundTruth,
    average_precision,
    evaluate,
    match_detections,
)
from stochdet.nms import DetectionSet

BUCKET_INDEX = {"all": None, "small": 0, "medium": 1, "large": 2}


def random_instance(rng, n_images=None, n_classes=3):
    """A few images whose detections are jittered copies of the ground truth
    plus clutter, with sizes spanning all three buckets."""
    n_images = n_images or int(rng.integers(1, 6))
    dets, gts = {}, {}
    for img in range(n_images):
        k = int(rng.integers(0, 8))
        side = np.exp(rng.uniform(np.log(8), np.log(200), (k, 2)))
        xy = rng.uniform(0, 300, (k, 2))
        gb = np.concatenate([xy, xy + side], 1)
        gc = rng.integers(0, n_classes, k)
        keep = rng.random(k) < 0.8
        jit = gb[keep] + rng.normal(0, 1, (int(keep.sum()), 1)) * side[keep].repeat(2, 1) * 0.08
        jit[:, 2:] = np.maximum(jit[:, 2:], jit[:, :2] + 1)
        jc = np.where(rng.random(int(keep.sum())) < 0.9, gc[keep], rng.integers(0, n_classes, int(keep.sum())))
        m = int(rng.integers(0, 5))
        cxy = rng.uniform(0, 300, (m, 2))
        clutter = np.concatenate([cxy, cxy + np.exp(rng.uniform(np.log(8), np.log(200), (m, 2)))], 1)
        boxes = np.concatenate([jit, clutter])
        classes = np.concatenate([jc, rng.integers(0, n_classes, m)])
        dets[img] = DetectionSet(boxes, classes, rng.uniform(0, 1, len(boxes)))
        gts[img] = GroundTruth(gb, gc)
    return dets, gts


def to_plain(dets, gts):
    d = {i: [(tuple(b), int(c), float(s)) for b, c, s in zip(v.boxes, v.class_ids, v.scores)] for i, v in dets.items()}
    g = {i: [(tuple(b), int(c)) for b, c in zip(v.boxes, v.class_ids)] for i, v in gts.items()}
    return d, g


def test_matches_reference_on_random_instances():
    rng = np.random.default_rng(0)
    cfg = EvalConfig(classes=(0, 1, 2))
    for _ in range(50):
        dets, gts = random_instance(rng)
        rep = evaluate(dets, gts, cfg)
        d, g = to_plain(dets, gts)
        for name, idx in BUCKET_INDEX.items():
            ref, per = reference_map(d, g, cfg.classes, COCO_IOUS, idx)
            ours = rep.map[name]
            if ref is None:
                assert ours is None
            else:
                assert abs(ours - ref) <= 1e-9
                for (c, thr), v in per.items():
                    assert abs(rep.ap[name][c][COCO_IOUS.index(thr)] - v) <= 1e-9


def test_max_dets_respected_like_reference():
    rng = np.random.default_rng(1)
    dets, gts = random_instance(rng, n_images=3)
    cfg = EvalConfig(classes=(0, 1, 2), max_dets=3)
    d, g = to_plain(dets, gts)
    ref, _ = reference_map(d, g, cfg.classes, COCO_IOUS, None, max_dets=3)
    assert abs(evaluate(dets, gts, cfg).map["all"] - ref) <= 1e-9


def test_perfect_detector():
    rng = np.random.default_rng(2)
    _, gts = random_instance(rng, n_images=4)
    dets = {i: DetectionSet(g.boxes, g.class_ids, np.ones(len(g.boxes))) for i, g in gts.items()}
    rep = evaluate(dets, gts, EvalConfig(classes=(0, 1, 2)))
    for b, v in rep.map.items():
        if rep.counts[b]["gt"]:
            assert v == pytest.approx(1.0)


def test_no_detections():
    gts = {0: GroundTruth([[0, 0, 10, 10], [20, 20, 80, 80]], [0, 1])}
    rep = evaluate({0: DetectionSet()}, gts, EvalConfig(classes=(0, 1)))
    assert rep.map["all"] == 0.0
    assert rep.counts["all"]["fn"] == 2 and rep.counts["all"]["tp"] == 0


def test_invariants_on_random_instances():
    rng = np.random.default_rng(3)
    cfg = EvalConfig(classes=(0, 1, 2))
    for _ in range(20):
        dets, gts = random_instance(rng)
        rep = evaluate(dets, gts, cfg)
        for per in rep.ap.values():
            for row in per.values():
                assert all(v is None or 0.0 <= v <= 1.0 for v in row)
        for b, c in rep.counts.items():
            assert c["tp"] + c["fn"] == c["gt"]
        assert rep.counts["small"]["gt"] + rep.counts["medium"]["gt"] + rep.counts["large"]["gt"] == rep.counts["all"]["gt"]
        # ranking-only dependence on confidence
        scaled = {i: DetectionSet(v.boxes, v.class_ids, v.scores * 0.37) for i, v in dets.items()}
        assert evaluate(scaled, gts, cfg).ap == rep.ap


def test_adding_top_tp_never_lowers_map():
    rng = np.random.default_rng(4)
    cfg = EvalConfig(classes=(0, 1, 2))
    for _ in range(20):
        dets, gts = random_instance(rng, n_images=2)
        img = next((i for i, g in gts.items() if len(g.boxes)), None)
        if img is None:
            continue
        before = evaluate(dets, gts, cfg).map["all"]
        g = gts[img]
        d = dets[img]
        extra = DetectionSet(
            np.concatenate([d.boxes, g.boxes[:1]]), np.concatenate([d.class_ids, g.class_ids[:1]]), np.concatenate([d.scores, [2.0]])
        )
        after = evaluate({**dets, img: extra}, gts, cfg).map["all"]
        assert after >= before - 1e-12


def test_match_examples():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    m, g = match_detections(np.array([[0.0, 0.0, 10.0, 9.0]]), gt, 0.5)
    assert m.tolist() == [0] and g.tolist() == [True]
    m, g = match_detections(np.array([[0.0, 0.0, 10.0, 3.0]]), gt, 0.5)
    assert m.tolist() == [-1] and g.tolist() == [False]
    # two detections on one object: the first (more confident) wins
    m, _ = match_detections(np.array([[0.0, 0.0, 10.0, 8.0], [0.0, 0.0, 10.0, 7.0]]), gt, 0.5)
    assert m.tolist() == [0, -1]


def test_average_precision_examples():
    assert average_precision([True], [0.3], 1) == 1.0
    assert average_precision([False], [0.3], 1) == 0.0
    assert average_precision([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(interpolated_ap([True, False, True], 2))
    assert average_precision([], [], 0) is None
    assert average_precision([False], [0.5], 0) == 0.0


def test_errors_and_config():
    with pytest.raises(MismatchedImageIds):
        evaluate({0: DetectionSet()}, {1: GroundTruth(np.zeros((0, 4)), [])})
    with pytest.raises(ConfigError):
        EvalConfig(iou_thresholds=(0.6, 0.5))
    with pytest.raises(ConfigError):
        EvalConfig(max_dets=0)


def test_report_outputs():
    gts = {0: GroundTruth([[0, 0, 10, 10]], [0])}
    rep = evaluate({0: DetectionSet([[0, 0, 10, 10]], [0], [0.9])}, gts, EvalConfig(classes=(0,)))
    assert rep.to_text().splitlines()[0].split() == ["bucket", "mAP", "mAP@.5", "TP", "FP", "FN"]
    assert '"map"' in rep.to_json()
    assert rep.pr_csv().splitlines()[0] == "class_id,recall,precision"
    assert len(rep.pr_csv().splitlines()) == 1 + 101
