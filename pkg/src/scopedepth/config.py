"""Run configuration: a single flat dataclass.

Values come from (in increasing precedence) dataclass defaults, a YAML
config file, and command-line flags named after the fields. Defaults are
desk-scale: batch 2, 30 epochs on the synthetic data. The full-scale
preset from the original training recipe (batch 6, 36 epochs, 256x320)
is documented in the README rather than hard-coded.
"""

from __future__ import annotations

import argparse
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml


@dataclass
class RunConfig:
    # data
    train_manifest: str = "data/train.txt"
    val_manifest: str = "data/val.txt"
    test_manifest: str = "data/test.txt"
    height: int = 256
    width: int = 320
    d_min: float = 10.0
    d_max: float = 200.0
    n_points: int = 500
    sparse_noise_std: float = 0.0

    # model
    base_channels: int = 24
    feat_full: int = 32
    feat_quarter: int = 64
    hidden_dim: int = 64
    fusion_steps: int = 5
    denoiser_channels: int = 32
    spn_iterations: int = 6

    # diffusion schedule
    timesteps: int = 1000
    sampling_steps: int = 20
    beta_start: float = 1.0e-4
    beta_end: float = 0.02

    # losses
    gamma: float = 0.9
    w_depth: float = 1.0
    w_grad: float = 1.0
    w_diff: float = 1.0
    w_init: float = 1.0
    diffusion_draws: int = 1    # (t, noise) draws averaged per step

    # optimization
    optimizer: str = "adamw"
    lr: float = 1.0e-3
    weight_decay: float = 1.0e-4
    batch_size: int = 2
    epochs: int = 30
    max_steps: int = 0          # optimizer-step cap, 0 = run all epochs
    grad_clip: float = 1.0
    train_spn: bool = True      # False freezes the propagation stage

    # ablation switches
    use_diffusion: bool = True
    use_guidance: bool = True
    use_init_depth: bool = True

    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/run"
    log_every: int = 10
    val_interval: int = 1       # epochs between held-out metric passes, 0 = final only
    val_limit: int = 0          # cap on validation frames, 0 = all

    def validate(self) -> "RunConfig":
        if self.height % 4 or self.width % 4:
            raise ValueError(f"resolution {self.height}x{self.width} not divisible by 4")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.n_points < 0:
            raise ValueError(f"n_points must be >= 0, got {self.n_points}")
        if not 1 <= self.sampling_steps <= self.timesteps:
            raise ValueError(
                f"need 1 <= sampling_steps <= timesteps, got {self.sampling_steps}/{self.timesteps}"
            )
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f"bad beta range [{self.beta_start}, {self.beta_end}]")
        if self.fusion_steps < 1:
            raise ValueError(f"fusion_steps must be >= 1, got {self.fusion_steps}")
        if self.spn_iterations < 1:
            raise ValueError(f"spn_iterations must be >= 1, got {self.spn_iterations}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.diffusion_draws < 1:
            raise ValueError(f"diffusion_draws must be >= 1, got {self.diffusion_draws}")
        if self.optimizer.lower() not in ("adamw", "adam"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr must be > 0, batch_size >= 1, epochs >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def from_dict(values: dict) -> RunConfig:
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {}
    for key, value in values.items():
        target = known[key].type
        if target == "bool" or target is bool:
            coerced[key] = _parse_bool(value)
        elif target == "int" or target is int:
            coerced[key] = int(value)
        elif target == "float" or target is float:
            coerced[key] = float(value)
        else:
            coerced[key] = str(value)
    return RunConfig(**coerced).validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return from_dict(values)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field, defaulting to 'not given'."""
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        if f.type == "bool" or f.type is bool:
            kind = _parse_bool
        elif f.type == "int" or f.type is int:
            kind = int
        elif f.type == "float" or f.type is float:
            kind = float
        else:
            kind = str
        group.add_argument(
            f"--{f.name}", type=kind, default=None, help=f"override {f.name} (default {f.default})"
        )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any) plus explicit flag overrides, validated."""
    base = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    values = base.to_dict()
    for f in dataclasses.fields(RunConfig):
        given = getattr(args, f.name, None)
        if given is not None:
            values[f.name] = given
    return from_dict(values)
