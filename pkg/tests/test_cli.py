import csv
import json

import numpy as np
import pytest

from polferns.cli import main
from polferns.formats import read_label_map, write_covariance_raster, write_label_map
from polferns.metrics import confusion, metrics

TRAIN = ["--ferns", "6", "--fern-size", "4", "--samples-per-class", "60"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--width", "48", "--height", "40", "--seed", "1",
                 "--out", str(out)]) == 0
    return out


def _kv(path):
    return {k: float(v) for k, v in (line.split("=") for line in path.read_text().splitlines())}


def test_synth_outputs_and_manifest(scene):
    assert sorted(p.name for p in scene.iterdir()) == ["labels.pgm", "run.manifest", "scene.psc"]
    doc = json.loads((scene / "run.manifest").read_text())
    assert doc["command"] == "synth" and doc["seed"] == 1
    assert doc["config"]["width"] == 48 and "generate" in doc["timings_s"]


def test_synth_byte_identical(scene, tmp_path):
    assert main(["synth", "--width", "48", "--height", "40", "--seed", "1",
                 "--out", str(tmp_path)]) == 0
    for name in ("scene.psc", "labels.pgm"):
        assert (tmp_path / name).read_bytes() == (scene / name).read_bytes()


def test_synth_class_subset(tmp_path):
    assert main(["synth", "--width", "20", "--height", "20", "--classes", "3",
                 "--layout", "stripes", "--out", str(tmp_path)]) == 0
    assert read_label_map(tmp_path / "labels.pgm").labels.max() == 3


def test_missing_out_is_usage_error(capsys):
    assert main(["synth", "--preset", "five-class"]) == 2
    assert "--out" in capsys.readouterr().err


def test_bad_flag_values_are_usage_errors(tmp_path):
    assert main(["synth", "--layout", "spiral", "--out", str(tmp_path)]) == 2
    assert main(["synth", "--classes", "9", "--out", str(tmp_path)]) == 2
    assert main(["--threads", "0", "synth", "--out", str(tmp_path)]) == 2


def _train(scene, out, *extra):
    return main(["train", "--image", str(scene / "scene.psc"), "--labels",
                 str(scene / "labels.pgm"), *TRAIN, *extra, "--out", str(out)])


def test_train_predict_evaluate_roundtrip(scene, tmp_path):
    assert _train(scene, tmp_path / "t") == 0
    assert not (tmp_path / "t" / "trace.csv").exists()
    for run in ("p1", "p2"):
        assert main(["--threads", "2", "predict", "--model", str(tmp_path / "t" / "model.txt"),
                     "--image", str(scene / "scene.psc"), "--posteriors",
                     "--out", str(tmp_path / run)]) == 0
    for name in ("prediction.pgm", "posteriors.npy"):
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()
    assert main(["evaluate", "--pred", str(tmp_path / "p1" / "prediction.pgm"),
                 "--ref", str(scene / "labels.pgm"), "--posteriors",
                 str(tmp_path / "p1" / "posteriors.npy"), "--calibration",
                 "--out", str(tmp_path / "e")]) == 0
    pred = read_label_map(tmp_path / "p1" / "prediction.pgm", 5).labels
    ref = read_label_map(scene / "labels.pgm", 5).labels
    expected = metrics(confusion(pred, ref, 5))
    kv = _kv(tmp_path / "e" / "metrics.kv")
    assert kv["oa"] == expected.oa and kv["kappa"] == expected.kappa
    rows = list(csv.reader(open(tmp_path / "e" / "confusion.csv")))
    assert np.array_equal(np.array(rows[1:], int)[:, 1:], confusion(pred, ref, 5))
    hist = list(csv.reader(open(tmp_path / "e" / "entropy_histogram.csv")))
    assert len(hist) == 21
    assert sum(float(r[2]) for r in hist[1:]) == pytest.approx(1.0)
    calib = list(csv.reader(open(tmp_path / "e" / "calibration.csv")))
    assert calib[0] == ["bin_lo", "bin_hi", "confidence", "accuracy", "count"]
    assert sum(int(r[4]) for r in calib[1:]) == pred.size


def test_train_is_deterministic(scene, tmp_path):
    assert _train(scene, tmp_path / "a", "--optimize", "iterative", "--it-min", "5",
                  "--patience", "3") == 0
    assert _train(scene, tmp_path / "b", "--optimize", "iterative", "--it-min", "5",
                  "--patience", "3") == 0
    for name in ("model.txt", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_iterative_trace_accepted_column_increases(scene, tmp_path):
    assert _train(scene, tmp_path, "--optimize", "iterative", "--it-min", "30",
                  "--patience", "15") == 0
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    accepted = [float(r["val_objective"]) for r in rows if r["accepted"] == "1"]
    assert all(b > a for a, b in zip(accepted, accepted[1:]))
    assert int(rows[-1]["iteration"]) >= 45


def test_preselect_flags(scene, tmp_path):
    assert _train(scene, tmp_path, "--optimize", "preselect", "--pool-size", "200",
                  "--ig-min", "0.01", "--corr-max", "0.9") == 0
    doc = json.loads((tmp_path / "run.manifest").read_text())
    assert doc["config"]["preselect"]["pool_size"] == 200


def test_missing_class_named(tmp_path, capsys):
    cov = np.tile(np.eye(3), (4, 4, 1, 1))
    write_covariance_raster(cov, tmp_path / "s.psc")
    lab = np.ones((4, 4), np.uint8)
    lab[0, 0] = 3
    write_label_map(lab, tmp_path / "l.pgm")
    rc = main(["train", "--image", str(tmp_path / "s.psc"), "--labels", str(tmp_path / "l.pgm"),
               "--out", str(tmp_path / "t")])
    assert rc == 1
    assert "class 2" in capsys.readouterr().err


def test_predict_single_pixel(scene, tmp_path):
    assert _train(scene, tmp_path / "t") == 0
    write_covariance_raster(np.eye(3)[None, None], tmp_path / "one.psc")
    assert main(["predict", "--model", str(tmp_path / "t" / "model.txt"), "--image",
                 str(tmp_path / "one.psc"), "--out", str(tmp_path / "p")]) == 0
    lab = read_label_map(tmp_path / "p" / "prediction.pgm", 5).labels
    assert lab.shape == (1, 1) and 1 <= lab[0, 0] <= 5
    assert main(["predict", "--model", str(tmp_path / "t" / "model.txt"), "--image",
                 str(tmp_path / "one.psc"), "--classes", "4", "--out", str(tmp_path / "q")]) == 1


def test_evaluate_perfect(scene, tmp_path):
    labels = str(scene / "labels.pgm")
    assert main(["evaluate", "--pred", labels, "--ref", labels, "--out", str(tmp_path)]) == 0
    kv = _kv(tmp_path / "metrics.kv")
    assert all(kv[k] == 1.0 for k in ("oa", "aa", "kappa", "f1_macro", "miou"))


def test_evaluate_errors(scene, tmp_path):
    labels = str(scene / "labels.pgm")
    assert main(["evaluate", "--pred", labels, "--ref", labels, "--calibration",
                 "--out", str(tmp_path)]) == 2
    write_label_map(np.ones((3, 3), np.uint8), tmp_path / "small.pgm")
    assert main(["evaluate", "--pred", str(tmp_path / "small.pgm"), "--ref", labels,
                 "--out", str(tmp_path)]) == 1


def test_crossval_aggregation(scene, tmp_path):
    assert main(["crossval", "--image", str(scene / "scene.psc"), "--labels",
                 str(scene / "labels.pgm"), *TRAIN, "--folds", "2", "--repeats", "2",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "crossval_folds.csv")))
    assert len(rows) == 4
    aa = np.array([float(r["aa"]) for r in rows])
    summary = (tmp_path / "crossval_summary.txt").read_text()
    assert f"aa = {aa.mean():.4f} +- {aa.std(ddof=1):.4f}" in summary


def test_crossval_narrow_image(tmp_path):
    write_covariance_raster(np.tile(np.eye(3), (6, 3, 1, 1)), tmp_path / "s.psc")
    write_label_map(np.ones((6, 3), np.uint8), tmp_path / "l.pgm")
    assert main(["crossval", "--image", str(tmp_path / "s.psc"), "--labels",
                 str(tmp_path / "l.pgm"), "--folds", "5", "--out", str(tmp_path / "c")]) == 1
