"""End-to-end command-line flows and artifact contracts."""

import json

import numpy as np
import pytest
import torch

from scopedepth.cli import main
from scopedepth.config import RunConfig, from_dict, load_config, save_config
from scopedepth.data import DepthMap, load_depth, load_sample
from scopedepth.report import Intrinsics, backproject, save_error_map


def _run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """make-synth -> train once; shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert _run(
        "make-synth", "--out", data, "--n_train", 3, "--n_val", 1, "--n_test", 2,
        "--height", 32, "--width", 40, "--seed", 5,
    ) == 0
    run_dir = root / "run"
    assert _run(
        "train",
        "--train_manifest", data / "train.txt",
        "--val_manifest", data / "val.txt",
        "--test_manifest", data / "test.txt",
        "--height", 32, "--width", 40, "--n_points", 40,
        "--base_channels", 8, "--feat_full", 8, "--feat_quarter", 16,
        "--hidden_dim", 16, "--fusion_steps", 2, "--denoiser_channels", 8,
        "--spn_iterations", 2, "--sampling_steps", 4, "--timesteps", 50,
        "--batch_size", 2, "--epochs", 1, "--max_steps", 2,
        "--val_interval", 1, "--log_every", 1,
        "--out_dir", run_dir, "--quiet",
    ) == 0
    return {"root": root, "data": data, "run": run_dir, "ckpt": run_dir / "checkpoint.pt"}


def test_make_synth_writes_splits(cli_workspace):
    data = cli_workspace["data"]
    for split, n in (("train", 3), ("val", 1), ("test", 2)):
        lines = (data / f"{split}.txt").read_text().strip().splitlines()
        assert len(lines) == n
    info = json.loads((data / "dataset.json").read_text())
    assert info["scene"]["height"] == 32
    assert (data / "images" / "train_0000.png").exists()
    assert (data / "depths" / "train_0000.json").exists()


def test_train_writes_curve_and_config(cli_workspace):
    run = cli_workspace["run"]
    assert (run / "checkpoint.pt").exists()
    assert (run / "training_curve.png").exists()
    cfg = load_config(run / "config.yaml")
    assert cfg.height == 32 and cfg.n_points == 40
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["event"] for r in log].count("val") == 1  # final-epoch validation


def test_evaluate_artifacts(cli_workspace, tmp_path):
    out = tmp_path / "eval"
    assert _run("evaluate", "--checkpoint", cli_workspace["ckpt"],
                "--split", "test", "--out", out) == 0

    frames = [json.loads(l) for l in (out / "frames.jsonl").read_text().splitlines()]
    assert len(frames) == 2  # one record per test frame
    assert {f["id"] for f in frames} == {"test_0000", "test_0001"}

    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# ")
    meta = json.loads(lines[0][2:])
    assert meta["config"]["seed"] == 0 and meta["split"] == "test"
    header = lines[1].split(",")
    for col in ("id", "rmse_mm", "mae_mm", "rel", "delta"):
        assert col in header
    assert len(lines) == 2 + len(frames)

    summary = json.loads((out / "summary.json").read_text())
    assert summary["summary"]["frames"] == 2
    assert "config" in summary
    assert (out / "metrics.png").exists()


def test_evaluate_allows_eval_safe_overrides(cli_workspace, tmp_path):
    out = tmp_path / "eval_o"
    assert _run("evaluate", "--checkpoint", cli_workspace["ckpt"],
                "--split", "val", "--out", out, "--n_points", 15) == 0
    meta = json.loads((tmp_path / "eval_o" / "metrics.csv").read_text().splitlines()[0][2:])
    assert meta["config"]["n_points"] == 15


def test_evaluate_blocks_architecture_overrides(cli_workspace, tmp_path):
    with pytest.raises(SystemExit, match="hidden_dim"):
        _run("evaluate", "--checkpoint", cli_workspace["ckpt"],
             "--out", tmp_path / "x", "--hidden_dim", 32)
    with pytest.raises(SystemExit, match="height"):
        _run("evaluate", "--checkpoint", cli_workspace["ckpt"],
             "--out", tmp_path / "x", "--height", 64)


def test_infer_artifacts_and_roundtrip(cli_workspace, tmp_path):
    data = cli_workspace["data"]
    out = tmp_path / "infer"
    assert _run(
        "infer", "--checkpoint", cli_workspace["ckpt"],
        "--image", data / "images" / "test_0000.png",
        "--depth", data / "depths" / "test_0000.png",
        "--out", out,
        "--point_cloud", "--fx", 40, "--fy", 40, "--cx", 19.5, "--cy", 15.5,
    ) == 0

    pred, meta = load_depth(out / "pred_depth.png")
    assert pred.shape == (32, 40)
    assert pred.mask.all()
    assert "config" in meta and "seeds" in meta  # provenance rides the sidecar
    assert meta["config"]["height"] == 32

    assert (out / "pred_depth_fig.png").exists()
    assert (out / "error_map.png").exists()
    assert (out / "error_map_fig.png").exists()

    ply = (out / "points.ply").read_text().splitlines()
    assert ply[0] == "ply"
    n_vertex = next(int(l.split()[-1]) for l in ply if l.startswith("element vertex"))
    assert n_vertex == 32 * 40
    comment = next(l for l in ply if l.startswith("comment"))
    assert "config" in comment
    # x y z r g b per row, z in (0, d_max]
    first = ply[ply.index("end_header") + 1].split()
    assert len(first) == 6
    assert 0 < float(first[2]) <= 200.0


def test_infer_requires_full_intrinsics(cli_workspace, tmp_path):
    data = cli_workspace["data"]
    with pytest.raises(SystemExit, match="fx"):
        _run("infer", "--checkpoint", cli_workspace["ckpt"],
             "--image", data / "images" / "test_0000.png",
             "--depth", data / "depths" / "test_0000.png",
             "--out", tmp_path / "x", "--point_cloud", "--fx", 40, "--fy", 40)


def test_infer_deterministic_given_seed(cli_workspace, tmp_path):
    data = cli_workspace["data"]
    preds = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert _run("infer", "--checkpoint", cli_workspace["ckpt"],
                    "--image", data / "images" / "test_0001.png",
                    "--depth", data / "depths" / "test_0001.png",
                    "--sparsity_seed", 7, "--out", out) == 0
        pred, _ = load_depth(out / "pred_depth.png")
        preds.append(pred.values)
    assert np.array_equal(preds[0], preds[1])


def test_sweep_artifacts_and_level_error(cli_workspace, tmp_path):
    out = tmp_path / "sweep"
    assert _run("sparsity-sweep", "--checkpoint", cli_workspace["ckpt"],
                "--levels", "10,50", "--sweep_seeds", "0,1", "--out", out) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    meta = json.loads(lines[0][2:])
    assert "config" in meta
    header = lines[1].split(",")
    for col in ("n_points", "rmse_mm_mean", "rmse_mm_std", "rel_mean", "rel_std"):
        assert col in header
    assert len(lines) == 2 + 2  # two levels
    assert (out / "sweep.png").exists()

    # more points than valid pixels: the sparsifier refuses
    with pytest.raises(ValueError, match="valid pixels"):
        _run("sparsity-sweep", "--checkpoint", cli_workspace["ckpt"],
             "--levels", str(32 * 40 + 1), "--sweep_seeds", "0", "--out", tmp_path / "x")


def test_ablate_four_variants(cli_workspace, tmp_path):
    data = cli_workspace["data"]
    out = tmp_path / "ablate"
    assert _run(
        "ablate",
        "--train_manifest", data / "train.txt",
        "--val_manifest", data / "val.txt",
        "--test_manifest", data / "test.txt",
        "--height", 32, "--width", 40, "--n_points", 40,
        "--base_channels", 8, "--feat_full", 8, "--feat_quarter", 16,
        "--hidden_dim", 16, "--fusion_steps", 2, "--denoiser_channels", 8,
        "--spn_iterations", 2, "--sampling_steps", 4, "--timesteps", 50,
        "--batch_size", 2, "--epochs", 1, "--max_steps", 1, "--val_interval", 0,
        "--out_dir", out, "--ablate_seeds", "0", "--quiet",
    ) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    rows = [dict(zip(lines[1].split(","), l.split(","))) for l in lines[2:]]
    assert [r["variant"] for r in rows] == ["baseline", "no_guidance", "no_init_depth", "full"]
    assert (out / "ablation.png").exists()
    # three training runs back the four rows
    assert (out / "baseline_seed0" / "checkpoint.pt").exists()
    assert (out / "no_guidance_seed0" / "checkpoint.pt").exists()
    assert (out / "full_seed0" / "checkpoint.pt").exists()
    assert not (out / "no_init_depth_seed0").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = RunConfig(n_points=123, seed=9)
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg

    import argparse

    ns = argparse.Namespace(config=str(path), n_points=7)
    from scopedepth.config import resolve_config

    merged = resolve_config(ns)
    assert merged.n_points == 7  # flag beats file
    assert merged.seed == 9      # file beats default


def test_config_validation_and_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys: zoom"):
        from_dict({"zoom": 3})
    with pytest.raises(ValueError, match="divisible"):
        RunConfig(height=30).validate()
    with pytest.raises(ValueError, match="sampling_steps"):
        RunConfig(sampling_steps=0).validate()
    with pytest.raises(ValueError, match="optimizer"):
        RunConfig(optimizer="sgd").validate()
    with pytest.raises(ValueError, match="d_min"):
        RunConfig(d_min=50.0, d_max=20.0).validate()
    # yaml round-trips booleans as booleans
    assert from_dict({"use_diffusion": "false"}).use_diffusion is False


def test_backproject_identity_intrinsics_oracle():
    # 2x2 depth with fx=fy=1, cx=cy=0: x = u*z, y = v*z
    depth = DepthMap(
        values=np.array([[1.0, 2.0], [3.0, 4.0]], np.float32),
        mask=np.ones((2, 2), bool),
    )
    pts = backproject(depth, Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0))
    expect = np.array([
        [0.0, 0.0, 1.0],   # (v=0, u=0)
        [2.0, 0.0, 2.0],   # (v=0, u=1)
        [0.0, 3.0, 3.0],   # (v=1, u=0)
        [4.0, 4.0, 4.0],   # (v=1, u=1)
    ])
    assert np.allclose(pts, expect)

    masked = DepthMap(values=depth.values, mask=np.array([[True, False], [True, True]]))
    assert backproject(masked, Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)).shape == (3, 3)
    with pytest.raises(ValueError):
        Intrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0)


def test_error_map_zero_for_perfect_prediction(tmp_path):
    gt = DepthMap(values=np.full((8, 8), 50.0, np.float32), mask=np.ones((8, 8), bool))
    p = save_error_map(gt.values, gt, tmp_path / "err.png")
    from PIL import Image

    raw = np.array(Image.open(p))
    assert raw.dtype == np.uint16
    assert raw.max() == 0
