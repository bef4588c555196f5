"""Training loop, checkpointing, split evaluation, sweeps and ablations.

The loop optimizes all four stages jointly:

    L = w_depth * L_D + w_grad * L_G + w_diff * L_diff + w_init * L_init

L_diff noises the (normalized, quarter-resolution) ground truth at a
uniformly drawn timestep and regresses the injected noise; the depth
supervision then flows through the single-step clean estimate of that
same noisy sample, so the upsampling and propagation stages train on the
kind of maps they will see coming out of the sampler. L_init is an
auxiliary coarse-depth term standing in for the pretrained encoder this
code does not ship: without it the initialization the sampler starts
from would be unanchored.

Every run directory gets a config snapshot, a JSONL log with one record
per optimizer step, and a resumable checkpoint embedding the config and
seeds.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, from_dict, save_config
from .data import DepthMap, ManifestDataset, Sample, normalize_depth, stable_seed
from .diffusion import estimate_x0
from .model import DepthCompletion, build_model, build_model_schedule, predict
from .objectives import (
    compute_gt_gradient,
    depth_loss,
    diffusion_loss,
    evaluate,
    gradient_loss,
)
from .schedule import NoiseSchedule, forward_diffuse


def batch_from_samples(samples: Sequence[Sample]) -> Dict[str, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    gt = torch.from_numpy(np.stack([s.depth.values for s in samples]))[:, None]
    gt_mask = torch.from_numpy(np.stack([s.depth.mask for s in samples]))[:, None]
    sp = torch.from_numpy(np.stack([s.sparse.values for s in samples]))[:, None]
    sp_mask = torch.from_numpy(
        np.stack([s.sparse.mask for s in samples]).astype(np.float32)
    )[:, None]
    return {
        "image": images,
        "gt": gt,
        "gt_mask": gt_mask,
        "sparse": sp,
        "sparse_mask": sp_mask,
        "ids": [s.id for s in samples],
    }


def downsample_depth(values: torch.Tensor, mask: torch.Tensor, factor: int = 4):
    """Masked box reduction of (B,1,H,W) depth; returns (values_q, mask_q)."""
    m = mask.to(values.dtype)
    num = F.avg_pool2d(values * m, factor)
    den = F.avg_pool2d(m, factor)
    mask_q = den > 0
    q = num / den.clamp_min(1e-8)
    return q * mask_q.to(values.dtype), mask_q


def training_losses(
    model: DepthCompletion,
    sched: NoiseSchedule,
    batch: Dict[str, torch.Tensor],
    cfg: RunConfig,
    noise_gen: torch.Generator,
) -> Dict[str, torch.Tensor]:
    gt_norm = normalize_depth(batch["gt"], cfg.d_min, cfg.d_max)
    gt_mask = batch["gt_mask"]
    enc = model.encode(batch["image"], batch["sparse"], batch["sparse_mask"])

    r_init = enc.backbone.d_init - gt_norm
    m = gt_mask.to(gt_norm.dtype)
    n_valid = m.sum().clamp_min(1.0)
    loss_init = ((r_init**2 + r_init.abs()) * m).sum() / n_valid

    gt_q, mask_q = downsample_depth(gt_norm, gt_mask)
    grad_gt, grad_mask = compute_gt_gradient(gt_q.squeeze(1), mask_q.squeeze(1))
    loss_grad = gradient_loss(enc.fused.grads, grad_gt, grad_mask, gamma=cfg.gamma)

    if model.use_diffusion:
        # the denoiser is cheap next to the encoder, so averaging the loss
        # over several (t, noise) draws buys variance reduction nearly for
        # free; the surrogate below sticks to the first draw
        draws = []
        d_quarter = None
        for _ in range(cfg.diffusion_draws):
            t = int(torch.randint(0, sched.num_timesteps, (1,), generator=noise_gen))
            eps = torch.randn(gt_q.shape, generator=noise_gen, dtype=gt_q.dtype)
            x_t = forward_diffuse(gt_q, t, eps, sched)
            eps_pred = model.denoise(x_t, enc.guidance, t)
            draws.append(diffusion_loss(eps, eps_pred))
            if d_quarter is None:
                d_quarter = estimate_x0(x_t, eps_pred, t, sched).clamp(-1.0, 1.0)
        loss_diff = torch.stack(draws).mean()
    else:
        loss_diff = torch.zeros((), dtype=gt_norm.dtype)
        d_quarter = enc.fused.depth

    d_full, d_final = model.refine(d_quarter, enc.backbone.f_quarter, enc.backbone.f_full)
    loss_depth = depth_loss(d_full, d_final, gt_norm, gt_mask)

    total = (
        cfg.w_depth * loss_depth
        + cfg.w_grad * loss_grad
        + cfg.w_diff * loss_diff
        + cfg.w_init * loss_init
    )
    return {
        "total": total,
        "depth": loss_depth,
        "grad": loss_grad,
        "diff": loss_diff,
        "init": loss_init,
    }


def make_optimizer(cfg: RunConfig, model: DepthCompletion) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    kind = cfg.optimizer.lower()
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")


def save_checkpoint(
    path,
    model: DepthCompletion,
    cfg: RunConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    step: int = 0,
    noise_gen: Optional[torch.Generator] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_state": model.state_dict(),
        "config": cfg.to_dict(),
        "epoch": epoch,
        "step": step,
        "seeds": {
            "seed": cfg.seed,
            "init": stable_seed(cfg.seed, "init"),
            "noise": stable_seed(cfg.seed, "noise"),
        },
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if noise_gen is not None:
        payload["noise_rng"] = noise_gen.get_state()
    torch.save(payload, path)
    return path


def load_checkpoint(path, overrides: Optional[dict] = None):
    """Rebuild (model, config, payload) from a checkpoint file.

    `overrides` may replace evaluation-facing config keys (manifests,
    n_points, seeds, ablation switches); the model is always constructed
    from the embedded architecture fields.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    values = dict(payload["config"])
    if overrides:
        values.update(overrides)
    cfg = from_dict(values)
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg, payload


def train(cfg: RunConfig, resume=None, quiet: bool = False) -> Path:
    """Run the optimization; returns the final checkpoint path."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    ckpt_path = out / "checkpoint.pt"

    sched = build_model_schedule(cfg)
    torch.manual_seed(stable_seed(cfg.seed, "init"))
    model = build_model(cfg)
    if not cfg.train_spn:
        for p in model.spn.parameters():
            p.requires_grad_(False)
    optimizer = make_optimizer(cfg, model)
    noise_gen = torch.Generator().manual_seed(stable_seed(cfg.seed, "noise"))

    start_epoch, step = 0, 0
    if resume is not None:
        payload = torch.load(Path(resume), map_location="cpu", weights_only=False)
        if payload["config"]["height"] != cfg.height or payload["config"]["width"] != cfg.width:
            raise ValueError(
                "resume resolution mismatch: checkpoint "
                f"{payload['config']['height']}x{payload['config']['width']} vs "
                f"config {cfg.height}x{cfg.width}"
            )
        model.load_state_dict(payload["model_state"])
        if "optimizer_state" in payload:
            optimizer.load_state_dict(payload["optimizer_state"])
        if "noise_rng" in payload:
            noise_gen.set_state(payload["noise_rng"])
        start_epoch = int(payload["epoch"]) + 1
        step = int(payload["step"])

    dataset = ManifestDataset(
        cfg.train_manifest, cfg.n_points, seed=cfg.seed, noise_std=cfg.sparse_noise_std
    )
    if len(dataset) == 0:
        raise ValueError(f"empty training manifest: {cfg.train_manifest}")

    val_dataset = None
    if cfg.val_interval > 0 and Path(cfg.val_manifest).exists():
        val_dataset = ManifestDataset(
            cfg.val_manifest,
            cfg.n_points,
            seed=stable_seed(cfg.seed, "val-sparse"),
            noise_std=cfg.sparse_noise_std,
        )
        if len(val_dataset) == 0:
            val_dataset = None

    log_path = out / "train_log.jsonl"
    t_start = time.time()
    with open(log_path, "a") as log:
        log.write(json.dumps({
            "event": "config",
            "config": cfg.to_dict(),
            "resumed_from": str(resume) if resume is not None else None,
            "start_epoch": start_epoch,
        }) + "\n")

        stop = cfg.max_steps > 0
        done = stop and step >= cfg.max_steps
        completed_epoch = start_epoch - 1
        for epoch in range(start_epoch, cfg.epochs):
            if done:
                break
            order = np.random.default_rng(
                stable_seed(cfg.seed, "order", epoch)
            ).permutation(len(dataset))
            model.train()
            for lo in range(0, len(order), cfg.batch_size):
                chunk = order[lo : lo + cfg.batch_size]
                samples = [dataset.get(int(i), epoch=epoch) for i in chunk]
                batch = batch_from_samples(samples)
                losses = training_losses(model, sched, batch, cfg, noise_gen)
                total = losses["total"]
                if not torch.isfinite(total):
                    raise RuntimeError(
                        f"non-finite loss at step {step + 1} "
                        f"(batch: {', '.join(batch['ids'])})"
                    )
                optimizer.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(
                        [p for p in model.parameters() if p.requires_grad], cfg.grad_clip
                    )
                optimizer.step()
                step += 1

                record = {
                    "event": "step",
                    "step": step,
                    "epoch": epoch,
                    "loss": float(total.detach()),
                    "loss_depth": float(losses["depth"].detach()),
                    "loss_grad": float(losses["grad"].detach()),
                    "loss_diff": float(losses["diff"].detach()),
                    "loss_init": float(losses["init"].detach()),
                    "lr": optimizer.param_groups[0]["lr"],
                }
                log.write(json.dumps(record) + "\n")
                if not quiet and (step % max(cfg.log_every, 1) == 0 or step == 1):
                    print(
                        f"step {step} epoch {epoch} loss {record['loss']:.4f} "
                        f"(depth {record['loss_depth']:.4f} grad {record['loss_grad']:.4f} "
                        f"diff {record['loss_diff']:.4f} init {record['loss_init']:.4f})"
                    )
                if stop and step >= cfg.max_steps:
                    done = True
                    break

            if val_dataset is not None and (
                (epoch + 1) % cfg.val_interval == 0 or done or epoch == cfg.epochs - 1
            ):
                summary, _ = evaluate_dataset(model, sched, cfg, val_dataset, limit=cfg.val_limit)
                log.write(json.dumps({"event": "val", "epoch": epoch, "step": step, **summary}) + "\n")
                if not quiet:
                    print(
                        f"val epoch {epoch}: rmse {summary['rmse_mm']:.3f} mm "
                        f"mae {summary['mae_mm']:.3f} mm rel {summary['rel']:.4f} "
                        f"delta {summary['delta']:.4f}"
                    )
                model.train()

            completed_epoch = epoch
            save_checkpoint(
                ckpt_path, model, cfg,
                optimizer=optimizer, epoch=epoch, step=step, noise_gen=noise_gen,
            )

        log.write(json.dumps({
            "event": "done", "step": step, "seconds": round(time.time() - t_start, 3),
        }) + "\n")

    save_checkpoint(
        ckpt_path, model, cfg,
        optimizer=optimizer, epoch=completed_epoch, step=step, noise_gen=noise_gen,
    )
    return ckpt_path


# ---------------------------------------------------------------------------
# evaluation


def predict_sample(
    model: DepthCompletion, sched: NoiseSchedule, cfg: RunConfig, sample: Sample
) -> Dict[str, torch.Tensor]:
    """Run the pipeline on one loaded sample; enforces the config resolution."""
    h, w = sample.image.shape[1:]
    if (h, w) != (cfg.height, cfg.width):
        raise ValueError(
            f"resolution mismatch: model expects {cfg.height}x{cfg.width}, "
            f"sample {sample.id!r} is {h}x{w}"
        )
    image = torch.from_numpy(sample.image)[None]
    sp = torch.from_numpy(sample.sparse.values)[None, None]
    sp_mask = torch.from_numpy(sample.sparse.mask.astype(np.float32))[None, None]
    return predict(
        model, sched, image, sp, sp_mask, seed=stable_seed(cfg.seed, "sample", sample.id)
    )


def evaluate_dataset(
    model: DepthCompletion,
    sched: NoiseSchedule,
    cfg: RunConfig,
    dataset: ManifestDataset,
    limit: int = 0,
) -> Tuple[dict, List[dict]]:
    """Aggregate the four metrics over a dataset; per-frame rows included."""
    count = len(dataset) if limit <= 0 else min(limit, len(dataset))
    if count == 0:
        raise ValueError("no frames to evaluate")
    frames = []
    for idx in range(count):
        sample = dataset.get(idx, epoch=0)
        outs = predict_sample(model, sched, cfg, sample)
        pred = DepthMap(
            values=outs["depth_mm"][0, 0].numpy().astype(np.float32),
            mask=np.ones((cfg.height, cfg.width), dtype=bool),
        )
        report = evaluate(pred, sample.depth)
        frames.append({"id": sample.id, **report.to_dict()})
    summary = {
        "frames": count,
        "rmse_mm": float(np.mean([f["rmse_mm"] for f in frames])),
        "mae_mm": float(np.mean([f["mae_mm"] for f in frames])),
        "rel": float(np.mean([f["rel"] for f in frames])),
        "delta": float(np.mean([f["delta"] for f in frames])),
    }
    return summary, frames


def evaluate_split(
    model: DepthCompletion,
    sched: NoiseSchedule,
    cfg: RunConfig,
    manifest,
    n_points: Optional[int] = None,
    sparsity_seed: Optional[int] = None,
    limit: int = 0,
) -> Tuple[dict, List[dict]]:
    dataset = ManifestDataset(
        manifest,
        cfg.n_points if n_points is None else n_points,
        seed=stable_seed(cfg.seed, "eval-sparse") if sparsity_seed is None else sparsity_seed,
        noise_std=cfg.sparse_noise_std,
    )
    return evaluate_dataset(model, sched, cfg, dataset, limit=limit)


# ---------------------------------------------------------------------------
# sweeps and ablations


SWEEP_LEVELS = [50, 500, 5000, 50000]


def sparsity_sweep(
    model: DepthCompletion,
    sched: NoiseSchedule,
    cfg: RunConfig,
    manifest,
    levels: Sequence[int] = tuple(SWEEP_LEVELS),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    limit: int = 0,
) -> List[dict]:
    """Re-sparsify the split at each level x seed and evaluate.

    The model is fixed (one checkpoint, trained at its own sparsity);
    seeds only vary the sparse sampling pattern.
    """
    rows = []
    for level in levels:
        rmse, rel = [], []
        for s in seeds:
            summary, _ = evaluate_split(
                model, sched, cfg, manifest, n_points=level, sparsity_seed=int(s), limit=limit
            )
            rmse.append(summary["rmse_mm"])
            rel.append(summary["rel"])
        rows.append({
            "n_points": int(level),
            "rmse_mm_mean": float(np.mean(rmse)),
            "rmse_mm_std": float(np.std(rmse)),
            "rel_mean": float(np.mean(rel)),
            "rel_std": float(np.std(rel)),
            "seeds": [int(s) for s in seeds],
        })
    return rows


ABLATION_VARIANTS = ["baseline", "no_guidance", "no_init_depth", "full"]


def run_ablation(
    cfg: RunConfig,
    seeds: Sequence[int] = (0, 1, 2),
    limit: int = 0,
    quiet: bool = False,
) -> List[dict]:
    """Train and evaluate the four pipeline variants on the test split.

    Per seed, three trainings suffice: disabling the coarse-depth
    initialization changes nothing about the objective (the diffusion
    loss noises ground truth, never the initialization), so that variant
    reuses the full model's checkpoint and only flips the sampling switch
    at evaluation time.
    """
    out_root = Path(cfg.out_dir)
    per_variant: Dict[str, List[dict]] = {name: [] for name in ABLATION_VARIANTS}
    for seed in seeds:
        trained: Dict[str, Path] = {}
        for name, switches in (
            ("baseline", {"use_diffusion": False}),
            ("no_guidance", {"use_guidance": False}),
            ("full", {}),
        ):
            run_cfg = dataclasses.replace(
                cfg,
                seed=int(seed),
                out_dir=str(out_root / f"{name}_seed{seed}"),
                **switches,
            )
            trained[name] = train(run_cfg, quiet=quiet)

        for name in ABLATION_VARIANTS:
            ckpt = trained.get(name, trained["full"])
            overrides = {"use_init_depth": name != "no_init_depth"}
            model, eval_cfg, _ = load_checkpoint(ckpt, overrides=overrides)
            sched = build_model_schedule(eval_cfg)
            summary, _ = evaluate_split(
                model, sched, eval_cfg, cfg.test_manifest, limit=limit
            )
            per_variant[name].append({"seed": int(seed), **summary})

    rows = []
    for name in ABLATION_VARIANTS:
        runs = per_variant[name]
        rows.append({
            "variant": name,
            "rmse_mm_mean": float(np.mean([r["rmse_mm"] for r in runs])),
            "mae_mm_mean": float(np.mean([r["mae_mm"] for r in runs])),
            "rel_mean": float(np.mean([r["rel"] for r in runs])),
            "delta_mean": float(np.mean([r["delta"] for r in runs])),
            "seeds": [r["seed"] for r in runs],
        })
    return rows
