import hashlib
import json

import numpy as np
import pytest

from onvs.cli import main

DS_SET = [
    "--set", "dataset.n_views=6", "--set", "dataset.width=24",
    "--set", "dataset.height=24",
]
TRAIN_SET = [
    "--set", "train.steps=6", "--set", "train.rays_per_step=64",
    "--set", "train.train_coarse=8", "--set", "train.train_fine=8",
    "--set", "train.holdout=5", "--set", "model.grid_h=6", "--set", "model.grid_w=6",
]
RENDER_SET = ["--set", "render.n_coarse=8", "--set", "render.n_fine=8"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Dataset + tiny trained model shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-dataset", *DS_SET, "--out", str(root / "ds")]) == 0
    assert main([
        "train-opp", "--dataset", str(root / "ds"), "--out", str(root / "opp"),
        *TRAIN_SET,
    ]) == 0
    assert main([
        "finetune-corf", "--dataset", str(root / "ds"),
        "--model", str(root / "opp" / "model.prm"),
        "--set", "corf.steps=3", "--set", "corf.views=2",
        "--set", "corf.cache_samples=8", *RENDER_SET,
    ]) == 0
    return root


def test_make_dataset_outputs(work):
    ds = work / "ds"
    assert (ds / "arrays.prm").exists()
    assert (ds / "meta.json").exists()
    man = json.loads((ds / "manifest.json").read_text())
    assert man["subcommand"] == "make-dataset"
    assert man["seed"] == 0
    for rel, digest in man["outputs"].items():
        blob = (ds / rel).read_bytes()
        assert hashlib.sha256(blob).hexdigest() == digest


def test_train_outputs(work):
    opp = work / "opp"
    assert (opp / "model.prm").exists()
    rep = json.loads((opp / "report.json").read_text())
    assert rep["steps_run"] == 6
    # finetune-corf ran last and overwrote the model in place, so the
    # directory's manifest describes that step
    man = json.loads((opp / "manifest.json").read_text())
    assert man["subcommand"] == "finetune-corf"
    assert "dataset" in man["inputs"] and "model" in man["inputs"]


def test_render_and_determinism(work, tmp_path):
    args = [
        "render", "--dataset", str(work / "ds"),
        "--model", str(work / "opp" / "model.prm"), "--views", "0,5", *RENDER_SET,
    ]
    assert main([*args, "--out", str(tmp_path / "r1")]) == 0
    assert main([*args, "--out", str(tmp_path / "r2")]) == 0
    for branch in ("nerf", "gan", "confidence", "fused"):
        for stem in ("view_000", "view_005"):
            p1 = tmp_path / "r1" / branch / f"{stem}.png"
            p2 = tmp_path / "r2" / branch / f"{stem}.png"
            assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "r1" / "arrays.prm").exists()
    assert (tmp_path / "r1" / "cameras.txt").exists()


def test_render_orbit(work, tmp_path):
    assert main([
        "render", "--dataset", str(work / "ds"),
        "--model", str(work / "opp" / "model.prm"), "--orbit", "3", *RENDER_SET,
        "--out", str(tmp_path / "orb"),
    ]) == 0
    assert (tmp_path / "orb" / "fused" / "orbit_002.png").exists()


def test_eval(work, tmp_path, capsys):
    rdir = tmp_path / "r"
    assert main([
        "render", "--dataset", str(work / "ds"),
        "--model", str(work / "opp" / "model.prm"), "--views", "all", *RENDER_SET,
        "--out", str(rdir),
    ]) == 0
    assert main([
        "eval", "--pred", str(rdir / "fused"), "--ref", str(work / "ds" / "preview"),
        "--model", str(work / "opp" / "model.prm"),
    ]) == 0
    out = dict(
        line.split(" ", 1) for line in capsys.readouterr().out.strip().splitlines()
    )
    assert int(out["pairs"]) == 6
    assert float(out["psnr"]) > 0
    assert 0.0 <= float(out["ssim"]) <= 1.0
    assert "pixel_mse" in out
    total = (
        int(out["params_color_read"]) + int(out["params_confidence"])
        + int(out["params_upsampler"])
    )
    assert int(out["params_overhead_total"]) == total


def test_enhance_identity(work, tmp_path):
    rdir = tmp_path / "r"
    assert main([
        "render", "--dataset", str(work / "ds"),
        "--model", str(work / "opp" / "model.prm"), "--views", "0,1", *RENDER_SET,
        "--out", str(rdir),
    ]) == 0
    enh = tmp_path / "enh"
    args = [
        "enhance", "--render-dir", str(rdir),
        "--model", str(work / "opp" / "model.prm"), "--out", str(enh),
        "--set", "enhance.backend=identity", "--set", "enhance.n_keyframes=3",
        "--set", "enhance.steps=3", *RENDER_SET,
    ]
    assert main(args) == 0
    assert (enh / "enhanced" / "view_000.png").exists()
    assert (enh / "keyframes.prm").exists()
    first = (enh / "enhanced" / "view_000.png").read_bytes()
    # second run picks up the cache and reproduces the output exactly
    assert main(args) == 0
    assert (enh / "enhanced" / "view_000.png").read_bytes() == first


def test_exit_codes(work, tmp_path, capsys):
    assert main(["train-opp", "--dataset", str(tmp_path / "nope")]) == 3
    assert main(["train-opp", "--dataset", str(work / "ds"), "--set", "train.bad=1"]) == 2
    assert main([
        "render", "--dataset", str(work / "ds"),
        "--model", str(work / "ds" / "arrays.prm"), "--views", "0",
    ]) == 5
    assert main([
        "render", "--dataset", str(work / "ds"),
        "--model", str(work / "opp" / "model.prm"), "--views", "0,99",
    ]) == 2
    assert main(["eval"]) == 2
    err_lines = [
        ln for ln in capsys.readouterr().err.strip().splitlines() if ln
    ]
    assert len(err_lines) == 5
    assert all(ln.startswith("error: ") for ln in err_lines)


def test_sweep_table_shape(work, tmp_path, capsys):
    out = tmp_path / "sw"
    assert main([
        "sweep", "--dataset", str(work / "ds"), "--out", str(out),
        "--set", "train.steps=2", "--set", "train.rays_per_step=32",
        "--set", "train.train_coarse=4", "--set", "train.train_fine=4",
        "--set", "train.holdout=5", "--set", "model.grid_h=6", "--set", "model.grid_w=6",
        "--set", "corf.steps=2", "--set", "corf.views=2", "--set", "corf.cache_samples=4",
        *RENDER_SET,
    ]) == 0
    rows = json.loads((out / "table.json").read_text())
    assert len(rows) == 6
    assert [r["sweep"] for r in rows] == ["lambda_gan"] * 3 + ["lambda_per"] * 3
    assert [r["lambda_gan"] for r in rows[:3]] == [1e-4, 1e-3, 1e-2]
    assert all(r["lambda_per"] == 1e-2 for r in rows[:3])
    assert [r["lambda_per"] for r in rows[3:]] == [1e-3, 1e-2, 1e-1]
    assert all(r["lambda_gan"] == 1e-3 for r in rows[3:])
    for r in rows:
        assert set(r) >= {"psnr", "ssim", "sharpness", "pixel_mse"}
    table = (out / "table.txt").read_text().splitlines()
    assert len(table) == 7  # header + 6 rows
