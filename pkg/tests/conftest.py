"""Shared fixtures: a tiny on-disk dataset and a briefly trained checkpoint.

Everything here is desk-scale (32x40 frames, a handful of optimizer steps)
so the full unit suite stays fast; the acceptance suite builds its own
larger datasets.
"""

import dataclasses

import pytest
import torch

from scopedepth.config import RunConfig
from scopedepth.data import SceneConfig, generate_dataset
from scopedepth.train import train


@pytest.fixture(autouse=True)
def _single_thread():
    # keep CPU math deterministic and fair across parallel test workers
    torch.set_num_threads(min(4, torch.get_num_threads()))
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """32x40 synthetic dataset: 4 train / 2 val / 2 test frames."""
    root = tmp_path_factory.mktemp("tiny_data")
    scene = SceneConfig(height=32, width=40)
    generate_dataset(root, n_train=4, n_val=2, n_test=2, scene=scene, seed=11)
    return root


def tiny_config(data_root, out_dir, **overrides) -> RunConfig:
    base = dict(
        train_manifest=str(data_root / "train.txt"),
        val_manifest=str(data_root / "val.txt"),
        test_manifest=str(data_root / "test.txt"),
        height=32,
        width=40,
        n_points=60,
        base_channels=8,
        feat_full=8,
        feat_quarter=16,
        hidden_dim=16,
        fusion_steps=2,
        denoiser_channels=8,
        spn_iterations=2,
        sampling_steps=5,
        timesteps=100,
        batch_size=2,
        epochs=100,  # max_steps is the effective stop
        max_steps=2,
        lr=1e-3,
        val_interval=0,
        log_every=1,
        out_dir=str(out_dir),
        seed=3,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tiny_dataset, tmp_path_factory):
    """One short training run; returns (checkpoint path, config)."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config(tiny_dataset, out, max_steps=3)
    ckpt = train(cfg, quiet=True)
    return ckpt, cfg


@pytest.fixture()
def replace_cfg():
    return dataclasses.replace
