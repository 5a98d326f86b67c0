import json

import numpy as np
import pytest

from stochdet.accumulator import accumulate
from stochdet.cli import main
from stochdet.dataio import DetectionFile, load_annotations, load_detections, save_detections
from stochdet.nms import NmsConfig, nms
from stochdet.pseudolabel import accumulated


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> detect -> accumulate on a handful of target scenes."""
    tmp = tmp_path_factory.mktemp("cli")
    code, sim = run(tmp, "sim", "simulate", "--domain", "target", "--scenes", "3")
    assert code == 0
    code, det = run(tmp, "det", "detect", "--scenes-file", str(sim / "scenes.json"), "--runs", "3", "--boxes", "40", "--seed", "2")
    assert code == 0
    code, acc = run(tmp, "acc", "accumulate", "--runs-file", str(det / "detections.json"))
    assert code == 0
    return tmp, sim, det, acc


def test_outputs_and_metadata(pipeline):
    _, sim, det, acc = pipeline
    for d in (sim, det, acc):
        meta = json.loads((d / "metadata.json").read_text())
        assert {"command", "config", "config_hash", "seed", "versions"} <= set(meta)
    assert (sim / "scenes.npz").exists() and (sim / "size_histogram.csv").exists()
    assert json.loads((det / "manifest.json").read_text())["n_runs"] == 3


def test_accumulate_single_run_is_plain_nms(pipeline, tmp_path):
    _, _, det, _ = pipeline
    runs = load_detections(det / "detections.json").runs()
    first = [r for img in sorted(runs, key=str) for r in runs[img][:1]]
    save_detections(tmp_path / "one.json", DetectionFile.from_runs(first))
    code, out = run(tmp_path, "acc1", "accumulate", "--runs-file", str(tmp_path / "one.json"), "--iou-thr", "0.5")
    assert code == 0
    got = load_detections(out / "accumulated.json").sets()
    for r in first:
        want = nms(r.detections, NmsConfig(0.5))
        np.testing.assert_allclose(got[r.image_id].boxes, want.boxes, atol=1e-9)
        assert got[r.image_id].scores.tolist() == want.scores.tolist()
        assert accumulate([r]).detections == want


def test_eval_ground_truth_scores_one(pipeline):
    tmp, sim, _, _ = pipeline
    ann = load_annotations(sim / "scenes.json")
    perfect = [
        {"image_id": a.image_id, "category_id": a.category_id, "bbox": a.bbox, "score": 1.0} for a in ann.annotations
    ]
    (tmp / "perfect.json").write_text(json.dumps(perfect))
    code, out = run(tmp, "eval_gt", "eval", "--detections", str(tmp / "perfect.json"), "--annotations", str(sim / "scenes.json"), "--format", "json")
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["map"]["all"] == pytest.approx(1.0)


def test_rerun_is_byte_identical(pipeline):
    tmp, sim, det, acc = pipeline
    _, det2 = run(tmp, "det2", "detect", "--scenes-file", str(sim / "scenes.json"), "--runs", "3", "--boxes", "40", "--seed", "2")
    _, acc2 = run(tmp, "acc2", "accumulate", "--runs-file", str(det / "detections.json"))
    _, sim2 = run(tmp, "sim2", "simulate", "--domain", "target", "--scenes", "3")
    for a, b in ((det, det2), (acc, acc2), (sim, sim2)):
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_pseudolabel_and_eval(pipeline):
    tmp, sim, _, acc = pipeline
    code, pl = run(tmp, "pl", "pseudolabel", "--detections", str(acc / "accumulated.json"), "--images", str(sim / "scenes.json"), "--threshold", "0.3")
    assert code == 0
    labels = load_annotations(pl / "pseudo_labels.json")
    assert all(a.weight > 0.3 and a.provenance == accumulated(18) for a in labels.annotations)
    code, ev = run(tmp, "ev", "eval", "--detections", str(acc / "accumulated.json"), "--annotations", str(sim / "scenes.json"))
    assert code == 0
    assert (ev / "pr_curves.csv").exists() and (ev / "report.txt").exists()


def test_sweep_small_grid(tmp_path):
    argv = ["sweep", "--seeds", "2", "--scenes-per-seed", "1", "--runs", "1", "2", "--boxes", "300", "600", "--f-box-sizes", "1.0", "0.5"]
    code, a = run(tmp_path, "a", *argv)
    assert code == 0
    _, b = run(tmp_path, "b", *argv)
    assert (a / "table.csv").read_bytes() == (b / "table.csv").read_bytes()
    assert (a / "table.txt").read_bytes() == (b / "table.txt").read_bytes()


def test_exit_codes(tmp_path, capsys):
    code, _ = run(tmp_path, "x", "accumulate", "--runs-file", str(tmp_path / "missing.json"))
    assert code == 3
    (tmp_path / "bad.json").write_text("[{]")
    code, _ = run(tmp_path, "x", "accumulate", "--runs-file", str(tmp_path / "bad.json"))
    assert code == 3
    code, _ = run(tmp_path, "x", "simulate", "--domain", "nowhere")
    assert code == 2
    code, _ = run(tmp_path, "x", "sweep", "--boxes", "250")
    assert code == 2
    assert "ConfigError" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["detect"])
    assert e.value.code == 2
