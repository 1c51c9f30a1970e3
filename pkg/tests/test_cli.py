import io
import subprocess
import sys

import pytest

from gridspot.cli import build_parser, run


def call(*argv):
    out = io.StringIO()
    code = run([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> anchors -> train -> detect, on a tiny dataset."""
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert call("synth", "--out", data, "--count", 4, "--width", 64, "--height", 64,
                "--min-objects", 2, "--max-objects", 3, "--max-size", 16, "--seed", 3)[0] == 0
    assert call("anchors", "--labels", data / "labels", "--k", 5, "--out", root / "anchors.txt")[0] == 0
    code, text = call("train", "--data", data, "--out", run_dir, "--anchors", root / "anchors.txt",
                      "--input-size", 64, "--split", 1.0, "--epochs", 2, "--batch-size", 2,
                      "--multiscale-period", 0, "--checkpoint-every", 0, "--seed", 1)
    assert code == 0, text
    return root, data, run_dir


def test_synth_and_anchors_outputs(pipeline, capsys, tmp_path):
    root, data, _ = pipeline
    assert len(list((data / "images").glob("*.png"))) == 4
    assert (data / "classes.txt").read_text() == "aircraft\n"
    assert len((root / "anchors.txt").read_text().splitlines()) == 5
    code, text = call("anchors", "--labels", data / "labels", "--k", 5, "--seed", 1, "--out", tmp_path / "a.txt")
    assert code == 0
    lines = text.splitlines()
    assert len(lines) == 6 and lines[-1].startswith("mean_iou=")
    assert "seed=1" in capsys.readouterr().err


def test_train_outputs(pipeline):
    _, _, run_dir = pipeline
    for name in ("final.ckpt", "loss.csv", "loss.png", "anchors.txt", "train_config.txt", "holdout.txt"):
        assert (run_dir / name).is_file(), name
    assert (run_dir / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_is_byte_identical(pipeline, tmp_path):
    root, data, run_dir = pipeline
    code, _ = call("train", "--data", data, "--out", tmp_path / "again", "--anchors", root / "anchors.txt",
                   "--input-size", 64, "--split", 1.0, "--epochs", 2, "--batch-size", 2,
                   "--multiscale-period", 0, "--checkpoint-every", 0, "--seed", 1)
    assert code == 0
    for name in ("final.ckpt", "loss.csv", "loss.png"):
        assert (tmp_path / "again" / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_detect_and_eval(pipeline, tmp_path, capsys):
    _, data, run_dir = pipeline
    dets = tmp_path / "dets.txt"
    args = ("detect", "--weights", run_dir / "final.ckpt", "--images", data / "images", "--conf", 0.01,
            "--runs", 2, "--timing", tmp_path / "timing.txt", "--render", tmp_path / "render")
    assert call(*args, "--out", dets)[0] == 0
    assert "fps=" in capsys.readouterr().err
    assert call(*args, "--out", tmp_path / "again.txt")[0] == 0
    assert dets.read_bytes() == (tmp_path / "again.txt").read_bytes()
    rows = dets.read_text().splitlines()
    assert rows and all(len(r.split()) == 7 for r in rows)
    assert len(list((tmp_path / "render").glob("*_det.png"))) == 4
    timing = (tmp_path / "timing.txt").read_text().splitlines()
    assert timing[:2] == ["images=4", "runs=2"] and len(timing) == 4

    code, text = call("eval", "--pred", dets, "--truth", data, "--timing", tmp_path / "timing.txt",
                      "--out", tmp_path / "report.txt", "--figure", tmp_path / "report.png", "--per-image")
    assert code == 0
    assert text.splitlines()[0].split() == ["Model", "Precision", "Recall", "F1", "Accuracy", "FPS"]
    assert len(text.splitlines()) == 2 + 4
    kv = dict(l.split("=") for l in (tmp_path / "report.txt").read_text().splitlines())
    assert kv["images"] == "4" and int(kv["tp"]) + int(kv["fp"]) == len(rows)
    assert float(kv["fps"]) > 0
    assert (tmp_path / "report.png").is_file()


def test_detect_tiled_path(pipeline, tmp_path):
    _, data, run_dir = pipeline
    image = sorted((data / "images").glob("*.png"))[0]
    code, text = call("detect", "--weights", run_dir / "final.ckpt", "--image", image, "--tile", 48,
                      "--overlap", 16, "--runs", 1, "--out", tmp_path / "d.txt")
    assert code == 0 and "detections in 1 images" in text


def test_convert(tmp_path, pipeline):
    _, data, _ = pipeline
    name = sorted((data / "images").glob("*.png"))[0].name
    records = tmp_path / "boxes.csv"
    records.write_text(f"filename,class_id,x_min,y_min,x_max,y_max\n{name},0,4,5,20,30\n{name},0,40,10,30,20\n")
    code, text = call("convert", "--records", records, "--images", data / "images", "--out", tmp_path / "ds")
    assert code == 0 and "converted 1 of 2 records into 4 images" in text
    label = (tmp_path / "ds" / "labels" / (name[:-4] + ".txt")).read_text().split()
    assert [float(v) for v in label] == pytest.approx([0, 12 / 64, 17.5 / 64, 16 / 64, 25 / 64], abs=1e-6)
    assert (tmp_path / "ds" / "images" / name).is_file()


# -- errors and flags ---------------------------------------------------------------------

def test_exit_codes(tmp_path, capsys):
    assert call("anchors", "--labels", tmp_path / "missing")[0] == 1
    assert "missing" in capsys.readouterr().err
    assert call("synth", "--out", tmp_path, "--count", 0)[0] == 1
    assert call("train", "--bogus")[0] == 1
    assert call("nosuchcommand")[0] == 1
    assert call("detect", "--weights", tmp_path / "w.ckpt", "--image", "a.png", "--list", "b.txt")[0] == 1
    (tmp_path / "w.ckpt").write_bytes(b"not a checkpoint")
    (tmp_path / "a.png").write_bytes(b"")
    assert call("detect", "--weights", tmp_path / "w.ckpt", "--image", tmp_path / "a.png")[0] == 1
    # runtime failure: the output path is a directory
    data = tmp_path / "data"
    assert call("synth", "--out", data, "--count", 2, "--width", 32, "--height", 32)[0] == 0
    (tmp_path / "anchors.txt").mkdir()
    assert call("anchors", "--labels", data / "labels", "--k", 2, "--out", tmp_path / "anchors.txt")[0] == 2


@pytest.mark.parametrize("command", ["convert", "synth", "anchors", "train", "detect", "eval"])
def test_help_lists_defaults(command, capsys):
    assert call(command, "--help")[0] == 0
    text = capsys.readouterr().out
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
    assert "(default:" in text


def test_config_overlay(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("count = 3\nwidth=48\nheight=48\nseed=7\n")
    assert call("synth", "--config", cfg, "--out", tmp_path / "a", "--count", 2)[0] == 0
    assert len(list((tmp_path / "a" / "images").iterdir())) == 2        # flag beats file
    from PIL import Image
    assert Image.open(next((tmp_path / "a" / "images").iterdir())).size == (48, 48)
    cfg.write_text("colour=red\n")
    assert call("synth", "--config", cfg, "--out", tmp_path / "b")[0] == 1
    cfg.write_text("count=-3\n")
    assert call("synth", "--config", cfg, "--out", tmp_path / "b")[0] == 1


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("GRIDSPOT_THREADS", "3")
    assert build_parser().parse_args(["synth", "--out", "x"]).threads == 3
    assert build_parser().parse_args(["synth", "--out", "x", "--threads", "2"]).threads == 2
    monkeypatch.setenv("GRIDSPOT_THREADS", "zero")
    assert call("synth", "--out", tmp_path)[0] == 1


def test_synth_rerun_identical(tmp_path):
    for d in ("a", "b"):
        assert call("synth", "--out", tmp_path / d, "--count", 2, "--width", 40, "--height", 40)[0] == 0
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gridspot", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("gridspot ")
