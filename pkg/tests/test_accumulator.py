import numpy as np
import pytest

from oracles import brute_nms
from stochdet.accumulator import (
    AccumulatedDetections,
    DetectionRun,
    accumulate,
    accumulate_streaming,
)
from stochdet.errors import EmptyRuns, MixedImages
from stochdet.nms import DetectionSet, NmsConfig, nms


def random_run(rng, image_id="img", run_index=1, n_max=20):
    n = int(rng.integers(0, n_max + 1))
    xy = rng.uniform(0, 60, (n, 2))
    wh = rng.uniform(2, 25, (n, 2))
    ds = DetectionSet(np.concatenate([xy, xy + wh], 1), rng.integers(0, 3, n), rng.uniform(0, 1, n))
    return DetectionRun(image_id, run_index, ds)


def test_single_run_is_plain_nms():
    run = random_run(np.random.default_rng(0))
    assert accumulate([run]).detections == nms(run.detections)


def test_identical_runs_collapse():
    run = random_run(np.random.default_rng(1))
    twice = accumulate([run, DetectionRun("img", 2, run.detections)])
    assert twice.detections == accumulate([run]).detections
    assert twice.n_runs == 2


def test_disjoint_runs_both_kept():
    a = DetectionSet([[0, 0, 10, 10]], [0], [0.6])
    b = DetectionSet([[40, 40, 50, 50]], [0], [0.7])
    out = accumulate([DetectionRun("x", 1, a), DetectionRun("x", 2, b)]).detections
    np.testing.assert_array_equal(out.boxes, [[40, 40, 50, 50], [0, 0, 10, 10]])
    np.testing.assert_array_equal(out.scores, [0.7, 0.6])


def test_concat_then_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        runs = [random_run(rng, run_index=i + 1) for i in range(4)]
        pooled = DetectionSet.concat([r.detections for r in runs])
        rows = [(tuple(b), int(c), float(s)) for b, c, s in zip(pooled.boxes, pooled.class_ids, pooled.scores)]
        want = pooled[np.array(brute_nms(rows, 0.5), dtype=int)]
        assert accumulate(runs).detections == want


def test_errors():
    with pytest.raises(EmptyRuns):
        accumulate([])
    rng = np.random.default_rng(3)
    with pytest.raises(MixedImages):
        accumulate([random_run(rng, "a"), random_run(rng, "b")])
    with pytest.raises(EmptyRuns):
        accumulate_streaming([], 0)
    with pytest.raises(MixedImages):
        accumulate_streaming([random_run(rng, "a"), random_run(rng, "b", 2)], 2)


def test_run_index_validated():
    with pytest.raises(ValueError):
        DetectionRun("a", 0)


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    for _ in range(30):
        runs = [random_run(rng, run_index=i + 1) for i in range(5)]
        perm = [runs[i] for in_ in [rng.permutation(5)] for i in in_]
        assert accumulate(perm).detections == accumulate(runs).detections


def test_streaming_matches_batch():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        runs = [random_run(rng, run_index=i + 1) for i in range(n)]
        assert accumulate_streaming(runs, n).detections == accumulate(runs).detections
        assert accumulate_streaming(lambda i: runs[i - 1], n).detections == accumulate(runs).detections


def test_streaming_single_run():
    run = random_run(np.random.default_rng(6))
    assert accumulate_streaming([run], 1).detections == accumulate([run]).detections


def test_lossy_fold_differs_where_exact_does_not():
    # run 1: A suppresses B. run 2: C beats A but does not touch B.
    r1 = DetectionRun("x", 1, DetectionSet([[0, 0, 10, 10], [3, 0, 13, 10]], [0, 0], [0.8, 0.7]))
    r2 = DetectionRun("x", 2, DetectionSet([[-3, 0, 7, 10]], [0], [0.9]))
    batch = accumulate([r1, r2]).detections
    assert len(batch) == 2  # C and the revived B
    assert accumulate_streaming([r1, r2], 2).detections == batch
    lossy = accumulate_streaming([r1, r2], 2, exact=False).detections
    assert len(lossy) == 1
