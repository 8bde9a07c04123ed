import json

import numpy as np
import pytest
import yaml

from conftest import SMALL
from invmark.checkpoint import load_checkpoint
from invmark.cli import main
from invmark.data import save_image
from invmark.reports import load_report, validate_csv


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(0)
    data = tmp_path / "imgs"
    for i in range(4):
        save_image(rng.random((32, 32, 3)), data / f"{i}.png")
    cfg = {
        "model": {k: list(v) if isinstance(v, tuple) else v for k, v in SMALL.items()},
        "training": {"batch_size": 4, "stage1_steps": 2, "stage2_steps": 2, "stage3_steps": 2, "lr": 1e-3},
        "data": {"image_dir": str(data), "image_size": 32},
    }
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    return tmp_path


def train(ws, *extra):
    return main(["train", "--config", str(ws / "run.yaml"), "--ckpt-dir", str(ws / "ck"), "--no-plots", *extra])


def test_train_all_then_evaluate_and_io(workspace, capsys):
    ws = workspace
    assert train(ws) == 0
    for s in ("stage1", "stage2", "stage3"):
        assert load_checkpoint(ws / "ck" / f"{s}.ckpt").stage == s
        assert (ws / "ck" / f"{s}_metrics.json").is_file()
    effective = yaml.safe_load((ws / "ck" / "config.yaml").read_text())
    assert effective["training"]["lr_decay"] == 0.95
    capsys.readouterr()

    rc = main(["evaluate", "--config", str(ws / "run.yaml"), "--ckpt", str(ws / "ck" / "stage3.ckpt"),
               "--noises", "jpeg:50", "blur:1", "histeq", "--out", str(ws / "rep")])
    assert rc == 0
    rows = validate_csv(capsys.readouterr().out)
    assert [r["noise"] for r in rows] == ["none", "jpeg", "gaussian_blur", "hist_eq"]
    assert load_report(ws / "rep" / "report.json").n_images == 4
    for name in ("report.csv", "sweep.png", "residuals.png"):
        assert (ws / "rep" / name).stat().st_size > 0

    img = ws / "imgs" / "0.png"
    assert main(["embed", "--ckpt", str(ws / "ck" / "stage3.ckpt"), "--image", str(img),
                 "--out", str(ws / "m.png"), "--wm", "F0A5"]) == 0
    assert json.loads(capsys.readouterr().out)["watermark"] == "F0A5"
    assert main(["extract", "--ckpt", str(ws / "ck" / "stage3.ckpt"), "--image", str(ws / "m.png"),
                 "--wm", "F0F0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["watermark"]) == 4 and 0 <= out["brr_percent"] <= 100


def test_stagewise_resume_matches(workspace):
    ws = workspace
    assert train(ws, "--stage", "1") == 0
    assert main(["train", "--config", str(ws / "run.yaml"), "--ckpt-dir", str(ws / "ck2"), "--no-plots",
                 "--stage", "2", "--resume", str(ws / "ck" / "stage1.ckpt")]) == 0
    assert load_checkpoint(ws / "ck2" / "stage2.ckpt").stage == "stage2"


def test_exit_codes(workspace, capsys):
    ws = workspace
    bad = ws / "bad.yaml"
    bad.write_text("training: {lr: 1e-3, bogus: 1}\n")
    assert main(["train", "--config", str(bad), "--data", str(ws / "imgs")]) == 2
    bad.write_text("augment: {probabilities: {jpeg: 0.5}}\n")
    assert main(["train", "--config", str(bad), "--data", str(ws / "imgs")]) == 2
    assert main(["extract", "--ckpt", str(ws / "missing.ckpt"), "--image", str(ws / "imgs" / "0.png")]) == 3
    assert train(ws, "--stage", "2") == 3
    assert main(["evaluate", "--ckpt", str(ws / "missing.ckpt"), "--data", str(ws / "imgs")]) == 3
    (ws / "notimg.png").write_text("x")
    assert train(ws, "--stage", "1") == 0
    assert main(["extract", "--ckpt", str(ws / "ck" / "stage1.ckpt"), "--image", str(ws / "notimg.png")]) == 5
    assert main(["embed", "--ckpt", str(ws / "ck" / "stage1.ckpt"), "--image", str(ws / "imgs" / "0.png"),
                 "--out", str(ws / "o.png"), "--wm", "XYZ"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--stage", "7"])
    assert exc.value.code == 2


def test_env_default_checkpoint_dir(workspace, monkeypatch):
    monkeypatch.setenv("INVMARK_CKPT_DIR", str(workspace / "envck"))
    assert main(["train", "--config", str(workspace / "run.yaml"), "--stage", "1", "--no-plots"]) == 0
    assert (workspace / "envck" / "stage1.ckpt").is_file()


def test_make_toy_data(tmp_path):
    assert main(["make-toy-data", str(tmp_path / "toy"), "--size", "32"]) == 0
    assert len(list((tmp_path / "toy" / "train").glob("*.png"))) == 8
