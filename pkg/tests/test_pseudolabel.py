import numpy as np
import pytest

from stochdet.accumulator import AccumulatedDetections
from stochdet.boxgeom import Box
from stochdet.errors import ConfigError
from stochdet.evaluation import GroundTruth
from stochdet.nms import DetectionSet
from stochdet.pseudolabel import (
    GROUND_TRUTH,
    SINGLE_RUN,
    PseudoLabel,
    VerifiedRegionSet,
    accumulated,
    filter_by_regions,
    ground_truth_in_regions,
    group_by_image,
    label_arrays,
    make_pseudo_labels,
    with_unit_weight,
)


def acc_of(scores, n_runs=18, image_id="a"):
    k = len(scores)
    boxes = np.array([[10.0 * i, 0.0, 10.0 * i + 8, 8.0] for i in range(k)]).reshape(-1, 4)
    return AccumulatedDetections(image_id, n_runs, DetectionSet(boxes, np.zeros(k, dtype=int), np.array(scores, dtype=float)))


def test_threshold_is_strict():
    labels = make_pseudo_labels(acc_of([0.9, 0.5, 0.51]), 0.5)
    assert [lb.weight for lb in labels] == [0.9, 0.51]
    assert all(lb.provenance == accumulated(18) for lb in labels)


def test_threshold_zero_keeps_all_and_empty_input():
    assert len(make_pseudo_labels(acc_of([0.2, 0.01]), 0.0)) == 2
    assert make_pseudo_labels(acc_of([]), 0.5) == []


def test_single_run_provenance():
    assert make_pseudo_labels(acc_of([0.8], n_runs=1))[0].provenance == SINGLE_RUN


def test_threshold_monotone_and_weights_exceed_threshold():
    rng = np.random.default_rng(0)
    acc = acc_of(rng.uniform(0, 1, 40))
    prev = None
    for thr in np.linspace(0, 0.95, 20):
        labels = make_pseudo_labels(acc, thr)
        assert all(lb.weight > thr for lb in labels)
        kept = {lb.box for lb in labels}
        if prev is not None:
            assert kept <= prev
        prev = kept


def test_bad_threshold():
    with pytest.raises(ConfigError):
        make_pseudo_labels(acc_of([0.9]), 1.0)
    with pytest.raises(ConfigError):
        make_pseudo_labels(acc_of([0.9]), -0.1)


def test_label_validation():
    with pytest.raises(ValueError):
        PseudoLabel(Box(0, 0, 1, 1), 0, 0.0, "a")
    with pytest.raises(ValueError):
        PseudoLabel(Box(0, 0, 1, 1), 0, 1.5, "a")


def test_region_filter_examples():
    inside = PseudoLabel(Box(2, 2, 8, 8), 0, 0.9, "a")
    half = PseudoLabel(Box(5, 0, 15, 10), 0, 0.9, "a")
    other = PseudoLabel(Box(2, 2, 8, 8), 0, 0.9, "b")
    regions = VerifiedRegionSet({"a": [Box(0, 0, 10, 10)]})
    assert filter_by_regions([inside], regions, 1.0) == [inside]
    assert filter_by_regions([other], regions, 1.0) == []
    assert filter_by_regions([half], regions, 0.6) == []
    assert filter_by_regions([half], regions, 0.5) == [half]


def test_region_filter_subset():
    rng = np.random.default_rng(1)
    labels = []
    for _ in range(50):
        x, y = rng.uniform(0, 80, 2)
        labels.append(PseudoLabel(Box(x, y, x + rng.uniform(1, 20), y + rng.uniform(1, 20)), 0, 0.7, "a"))
    regions = VerifiedRegionSet({"a": [Box(0, 0, 50, 50), Box(40, 40, 100, 100)]})
    for c in (0.3, 0.7, 1.0):
        out = filter_by_regions(labels, regions, c)
        assert set(out) <= set(labels)
    assert len(filter_by_regions(labels, regions, 0.3)) >= len(filter_by_regions(labels, regions, 1.0))
    with pytest.raises(ConfigError):
        filter_by_regions(labels, regions, 0.0)


def test_ground_truth_in_regions():
    gts = {"a": GroundTruth([[1, 1, 5, 5], [8, 0, 12, 4], [50, 50, 60, 60]], [0, 1, 2])}
    regions = VerifiedRegionSet({"a": [Box(0, 0, 10, 10)]})
    out = ground_truth_in_regions(gts, regions, 1.0)
    assert [(lb.box, lb.class_id, lb.weight, lb.provenance) for lb in out] == [(Box(1, 1, 5, 5), 0, 1.0, GROUND_TRUTH)]
    # the straddling box has exactly half its area inside
    assert len(ground_truth_in_regions(gts, regions, 0.5)) == 2
    assert ground_truth_in_regions(gts, VerifiedRegionSet(), 1.0) == []


def test_region_validation():
    VerifiedRegionSet({"a": [Box(0, 0, 10, 10)]}).validate({"a": (10, 10)})
    with pytest.raises(ConfigError):
        VerifiedRegionSet({"a": [Box(0, 0, 11, 10)]}).validate({"a": (10, 10)})
    with pytest.raises(ConfigError):
        VerifiedRegionSet({"b": []}).validate({"a": (10, 10)})


def test_helpers():
    labels = make_pseudo_labels(acc_of([0.9, 0.7], image_id="a")) + make_pseudo_labels(acc_of([0.8], image_id="b"))
    groups = group_by_image(labels)
    assert sorted(groups) == ["a", "b"] and len(groups["a"]) == 2
    assert all(lb.weight == 1.0 for lb in with_unit_weight(labels))
    boxes, classes, weights = label_arrays(groups["a"])
    assert boxes.shape == (2, 4) and weights.tolist() == [0.9, 0.7]
    assert label_arrays([])[0].shape == (0, 4)
