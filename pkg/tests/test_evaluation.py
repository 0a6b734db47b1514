import json
import math

import numpy as np
import pytest

from pianet.data.io import read_annotations
from pianet.data.volume import Nodule, ScanAnnotation
from pianet import evaluation as ev
from pianet.errors import ConfigError, DataError, PianetIOError


@pytest.fixture
def fixture(data_dir):
    anns = read_annotations(data_dir / "froc_annotations.csv")
    dets = ev.read_detections(data_dir / "froc_detections.csv")
    expected = json.loads((data_dir / "froc_expected.json").read_text())
    return anns, dets, expected


def test_fixture_labels(fixture):
    anns, dets, expected = fixture
    matches = ev.match_all(dets, anns)
    assert {m.scan_id: m.labels for m in matches} == expected["labels"]
    assert sum(m.n_relevant for m in matches) == expected["n_nodules"]


def test_fixture_curve_and_cpm_exact(fixture):
    anns, dets, expected = fixture
    curve, report, _ = ev.evaluate(dets, anns)
    assert len(curve) == len(expected["curve"])
    for got, want in zip(curve, expected["curve"]):
        num, den = want["fps_per_scan"]
        assert got.fps_per_scan == num / den
        assert got.sensitivity == want["sensitivity"]
        assert got.threshold == want["threshold"]
    assert list(report.sensitivities) == expected["operating_points"]
    num, den = expected["cpm"]
    assert report.cpm == num / den


def test_constant_curve_cpm():
    report = ev.cpm([ev.FrocPoint(0.0, 0.5, 1.0), ev.FrocPoint(10.0, 0.5, 0.1)])
    assert report.cpm == 0.5


def test_sensitivity_read_out_is_a_step():
    curve = [ev.FrocPoint(0.0, 0.2, 0.9), ev.FrocPoint(1.0, 0.6, 0.5), ev.FrocPoint(3.0, 0.9, 0.1)]
    assert ev.sensitivity_at(curve, 0.99) == 0.2
    assert ev.sensitivity_at(curve, 1.0) == 0.6
    assert ev.sensitivity_at(curve, 8.0) == 0.9
    assert ev.sensitivity_at([ev.FrocPoint(2.0, 1.0, 0.5)], 1.0) == 0.0


def test_scan_without_detections_counts_toward_rate():
    anns = {"a": ScanAnnotation("a", [Nodule(0, 0, 0, 4)]), "b": ScanAnnotation("b", [])}
    dets = {"a": np.array([[0, 0, 0, 4, 0.9], [30, 0, 0, 4, 0.8]])}
    curve, report, _ = ev.evaluate(dets, anns)
    assert curve[-1].fps_per_scan == 0.5 and curve[-1].sensitivity == 1.0


def test_iou_mode():
    ann = ScanAnnotation("a", [Nodule(0, 0, 0, 4)])
    m = ev.match_to_truth([[1, 0, 0, 4, 0.9]], ann, hit_rule=0.5, mode="iou")
    assert m.labels == [ev.TP]  # IoU 3/5
    m = ev.match_to_truth([[1, 0, 0, 4, 0.9]], ann, hit_rule=0.7, mode="iou")
    assert m.labels == [ev.FP]
    with pytest.raises(ConfigError):
        ev.match_to_truth([], ann, mode="box")


def test_errors():
    with pytest.raises(DataError, match="unknown scan ids: zz"):
        ev.match_all({"zz": np.zeros((0, 5))}, {"a": ScanAnnotation("a", [Nodule(0, 0, 0, 4)])})
    with pytest.raises(DataError, match="undefined"):
        ev.froc(ev.match_all({}, {"a": ScanAnnotation("a", [])}))
    with pytest.raises(ConfigError):
        ev.froc([])


def test_no_detections_gives_zero_curve():
    curve, report, _ = ev.evaluate({}, {"a": ScanAnnotation("a", [Nodule(0, 0, 0, 4)])})
    assert curve == [ev.FrocPoint(0.0, 0.0, math.inf)] and report.cpm == 0.0


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_roundtrip(fixture, fmt):
    anns, dets, _ = fixture
    _, report, _ = ev.evaluate(dets, anns)
    back = ev.parse_report(ev.format_report(report, fmt, 3, 4), fmt)
    assert back.cpm == report.cpm
    assert back.sensitivities == report.sensitivities
    assert back.curve == report.curve


def test_plot_data_and_bad_format(fixture, tmp_path):
    anns, dets, _ = fixture
    _, report, _ = ev.evaluate(dets, anns)
    text = ev.format_report(report, "plot-data")
    assert text.startswith("# cpm ") and len(text.splitlines()) == 2 + len(report.curve)
    with pytest.raises(ConfigError):
        ev.format_report(report, "xml")
    ev.write_report(tmp_path / "r.json", report)
    assert json.loads((tmp_path / "r.json").read_text())["version"] == ev.REPORT_VERSION


def test_detections_csv_roundtrip(fixture, tmp_path):
    _, dets, _ = fixture
    path = ev.write_detections(tmp_path / "d.csv", dets)
    back = ev.read_detections(path)
    assert list(back) == list(dets)
    for k in dets:
        np.testing.assert_array_equal(back[k], dets[k])


def test_detections_csv_errors(tmp_path):
    with pytest.raises(DataError, match=":1: header"):
        ev.parse_detections("a,b\n")
    with pytest.raises(DataError, match=":2: non-numeric"):
        ev.parse_detections(",".join(ev.DETECTION_COLUMNS) + "\ns,1,2,x,4,0.5\n")
    with pytest.raises(PianetIOError):
        ev.read_detections(tmp_path / "missing.csv")
