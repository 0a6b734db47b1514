import json
import subprocess
import sys

import numpy as np
import pytest

from pianet.cli import build_parser, main, render_slice
from pianet.data.io import read_annotations, read_volume
from pianet.data.volume import Volume
from pianet.evaluation import read_detections
from pianet.model import PiaNetConfig


def run(*argv):
    return main([str(a) for a in argv])


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps({"version": 1, "model": PiaNetConfig().reduced(32, 4).to_dict(),
                                "stage1": {"epochs": 1}, "stage2": {"epochs": 1}}))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, small_config):
    """phantom -> preprocess -> pretrain -> train -> detect -> evaluate on three small phantoms."""
    d = tmp_path_factory.mktemp("run")
    codes = [
        run("phantom", "--seed", 3, "--count", 3, "--side", 40, "--out", d / "ph"),
        run("preprocess", "--input", d / "ph", "--out", d / "pre"),
        run("pretrain", "--config", small_config, "--data", d / "pre", "--annotations", d / "ph/annotations.csv",
            "--out", d / "s1.ckpt"),
        run("train", "--config", small_config, "--data", d / "pre", "--annotations", d / "ph/annotations.csv",
            "--init", d / "s1.ckpt", "--out", d / "s2.ckpt", "--log", d / "train.jsonl"),
        run("detect", "--config", small_config, "--model", d / "s2.ckpt", "--data", d / "pre", "--out",
            d / "det.csv"),
        run("evaluate", "--detections", d / "det.csv", "--annotations", d / "ph/annotations.csv",
            "--out", d / "report.json"),
    ]
    return d, codes


def test_end_to_end_produces_report(pipeline):
    d, codes = pipeline
    assert codes == [0] * 6
    report = json.loads((d / "report.json").read_text())
    assert {"cpm", "curve", "operating_points"} <= set(report)
    assert 0.0 <= report["cpm"] <= 1.0
    assert set(read_detections(d / "det.csv")) <= set(read_annotations(d / "ph/annotations.csv"))
    assert read_volume(d / "pre/phantom-0003.vol").normalized


def test_manifest_contents(pipeline):
    d, _ = pipeline
    m = json.loads((d / "s2.ckpt.manifest.json").read_text())
    assert m["command"] == "train" and m["config_file"].endswith("small.json")
    assert m["resolved_config"]["stage2"]["epochs"] == 1
    assert m["resolved_config"]["model"]["input_cube_side"] == 32
    assert set(m["outputs"]) == {str(d / "s2.ckpt"), str(d / "train.jsonl")}
    assert all(len(h) == 64 for h in m["outputs"].values())
    assert m["timings_s"]["total"] >= 0
    assert (d / "ph" / "manifest.json").exists()


def test_phantom_same_seed_identical_tree(tmp_path):
    assert run("phantom", "--seed", 7, "--side", 40, "--out", tmp_path / "a") == 0
    assert run("phantom", "--seed", 7, "--side", 40, "--out", tmp_path / "b") == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "phantom-0007.mhd" in a and "phantom-0007_mask.mhd" in a
    assert run("phantom", "--seed", 9, "--side", 40, "--out", tmp_path / "c") == 0
    assert tree(tmp_path / "c") != a


def test_phantom_writes_hu(tmp_path):
    run("phantom", "--seed", 1, "--side", 40, "--out", tmp_path)
    v = read_volume(tmp_path / "phantom-0001.mhd")
    assert v.data.dtype == np.int16 and not v.normalized
    assert v.data.min() >= -1200 and v.data.max() <= 600


def test_detect_untrained_model_completes(tmp_path, small_config, pipeline):
    from pianet.checkpoint import Checkpoint, save_checkpoint
    from pianet.model import build_pianet

    d, _ = pipeline
    cfg = PiaNetConfig().reduced(32, 4)
    ckpt = Checkpoint(build_pianet(cfg, 0).state_dict(), {}, {"kind": "stage2", "model_config": cfg.to_dict()})
    save_checkpoint(tmp_path / "fresh.ckpt", ckpt)
    assert run("detect", "--config", small_config, "--model", tmp_path / "fresh.ckpt", "--data", d / "pre",
               "--out", tmp_path / "det.csv") == 0
    assert set(read_detections(tmp_path / "det.csv")) <= {"phantom-0003", "phantom-0004", "phantom-0005"}


def test_flags_override_config(tmp_path, small_config, pipeline):
    d, _ = pipeline
    assert run("pretrain", "--config", small_config, "--data", d / "pre", "--annotations", d / "ph/annotations.csv",
               "--epochs", 2, "--seed", 5, "--lr", 0.003, "--out", tmp_path / "s1.ckpt") == 0
    m = json.loads((tmp_path / "s1.ckpt.manifest.json").read_text())
    s1 = m["resolved_config"]["stage1"]
    assert (s1["epochs"], s1["seed"], s1["learning_rate"]) == (2, 5, 0.003)


def test_slice_burns_boxes(tmp_path):
    data = np.full((20, 30, 30), 40.0)
    volume = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), normalized=True)
    rows = np.array([[15.0, 12.0, 10.0, 8.0, 0.9], [5.0, 5.0, 10.0, 4.0, 0.1]])
    img = render_slice(volume, rows, 10, threshold=0.5)
    assert img[8, 11:20].tolist() == [255] * 9  # top edge y = 12 - 4
    assert img[8:17, 11].tolist() == [255] * 9
    assert img[12, 15] == 40 and img[3, 5] == 40  # interior and the low-score box untouched
    assert np.all(render_slice(volume, rows, 2, 0.5) == 40)  # box does not reach z = 2


def test_slice_command_writes_pgm(tmp_path, pipeline):
    d, _ = pipeline
    out = tmp_path / "s.pgm"
    assert run("slice", "--volume", d / "pre/phantom-0003.vol", "--detections", d / "det.csv", "--threshold", 0,
               "--out", out) == 0
    blob = out.read_bytes()
    head = blob.split(b"\n", 3)
    assert head[0] == b"P5" and head[2] == b"255"
    w, h = map(int, head[1].split())
    assert len(head[3]) == w * h
    assert (w, h) == read_volume(d / "pre/phantom-0003.vol").shape[:0:-1]


# -- failures and exit codes -----------------------------------------------------


def error_line(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("error code=")]
    assert len(lines) == 1
    return lines[0]


@pytest.mark.parametrize("payload, code", [
    ({"version": 2}, "code=CONFIG_ERROR exit=2"),
    ({"version": 1, "stage2": {"lr": 0.1}}, "unknown training config keys: lr"),
    ({"version": 1, "optimizer": {}}, "unknown config sections: optimizer"),
    ({"version": 1, "phantom": {"colour": 1}}, "unknown phantom config keys: colour"),
])
def test_config_errors_exit_2(tmp_path, capsys, payload, code):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(payload))
    assert run("phantom", "--config", cfg, "--out", tmp_path / "o") == 2
    line = error_line(capsys)
    assert line.startswith("error code=CONFIG_ERROR exit=2:") and code in line


def test_bad_json_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{version: 1")
    assert run("phantom", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "invalid JSON" in error_line(capsys)


def test_missing_files_exit_5(tmp_path, capsys):
    assert run("phantom", "--config", tmp_path / "none.json", "--out", tmp_path / "o") == 5
    assert error_line(capsys).startswith("error code=IO_ERROR exit=5:")
    assert run("detect", "--model", tmp_path / "none.ckpt", "--data", tmp_path, "--out", tmp_path / "d.csv") == 5


def test_data_errors_exit_3(tmp_path, capsys, pipeline):
    d, _ = pipeline
    (tmp_path / "bad.vol").write_bytes(b"not a volume")
    assert run("slice", "--volume", tmp_path / "bad.vol", "--out", tmp_path / "s.pgm") == 3
    assert error_line(capsys).startswith("error code=DATA_ERROR exit=3:")
    # raw HU volumes must be preprocessed before detection
    assert run("detect", "--model", d / "s2.ckpt", "--data", d / "ph", "--out", tmp_path / "d.csv") == 3


def test_unknown_flag_fails(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["phantom", "--out", "x", "--colour", "red"])
    assert exc.value.code == 2
    assert "error code=CONFIG_ERROR" in capsys.readouterr().err


def test_help_lists_all_flags():
    out = subprocess.run([sys.executable, "-m", "pianet.cli", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--config", "--preset", "--out", "--data", "--annotations", "--seed", "--epochs", "--lr",
                 "--batch-size", "--resume", "--log", "--init"):
        assert flag in out.stdout
    top = build_parser().format_help()
    for cmd in ("phantom", "preprocess", "pretrain", "train", "detect", "evaluate", "gradcheck", "slice"):
        assert cmd in top


def test_gradcheck_layers_only(tmp_path, capsys):
    assert run("gradcheck", "--layers-only", "--out", tmp_path / "gc.txt") == 0
    lines = (tmp_path / "gc.txt").read_text().splitlines()
    assert len(lines) == 8 and all(l.endswith("PASS") for l in lines)
