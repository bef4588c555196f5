"""Command-line interface.

Subcommands: make-synth (render a synthetic dataset), train, evaluate,
infer, sparsity-sweep, ablate. Training commands read a YAML config plus
per-field flag overrides; evaluation commands start from the config
embedded in the checkpoint and accept only overrides that cannot
invalidate the stored weights.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import RunConfig, add_config_flags, resolve_config
from .data import DepthMap, SceneConfig, generate_dataset, load_sample, stable_seed, save_depth
from .model import build_model_schedule
from .report import (
    Intrinsics,
    plot_ablation,
    plot_metrics,
    plot_sweep,
    plot_training_curve,
    save_depth_figure,
    save_error_figure,
    save_error_map,
    save_point_cloud,
    write_csv,
)
from .train import (
    SWEEP_LEVELS,
    evaluate_split,
    load_checkpoint,
    predict_sample,
    run_ablation,
    sparsity_sweep,
    train,
)

# Keys that may differ from the training run without touching the stored
# weights or the metric semantics.
EVAL_OVERRIDABLE = frozenset({
    "train_manifest", "val_manifest", "test_manifest",
    "n_points", "sparse_noise_std",
    "seed", "out_dir", "log_every", "val_interval", "val_limit",
    "use_diffusion", "use_guidance", "use_init_depth",
    "sampling_steps", "fusion_steps", "spn_iterations",
})


def _given_flags(args: argparse.Namespace) -> dict:
    values = {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return values


def _eval_overrides(args: argparse.Namespace) -> dict:
    values = _given_flags(args)
    blocked = sorted(set(values) - EVAL_OVERRIDABLE)
    if blocked:
        raise SystemExit(
            f"error: {', '.join(blocked)} cannot be overridden when loading a "
            "checkpoint (architecture and metric semantics are fixed at training time)"
        )
    return values


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    columns = list(rows[0].keys())
    widths = {
        c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns
    }
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for row in rows:
        print("  ".join(_fmt(row.get(c)).ljust(widths[c]) for c in columns))


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, (list, tuple)):
        return "/".join(str(v) for v in value)
    return str(value)


def _manifest_for(cfg: RunConfig, split: str) -> str:
    return {
        "train": cfg.train_manifest,
        "val": cfg.val_manifest,
        "test": cfg.test_manifest,
    }[split]


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_synth(args) -> int:
    scene = SceneConfig(
        height=args.height,
        width=args.width,
        d_min=args.d_min,
        d_max=args.d_max,
        focal=args.focal,
        radius=args.radius,
        straight=args.straight,
    )
    info = generate_dataset(
        args.out, args.n_train, args.n_val, args.n_test, scene, seed=args.seed
    )
    total = sum(info["splits"].values())
    print(f"wrote {total} frames ({info['splits']}) under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ckpt = train(cfg, resume=args.resume, quiet=args.quiet)
    out = Path(cfg.out_dir)
    plot_training_curve(out / "train_log.jsonl", out / "training_curve.png")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint, overrides=_eval_overrides(args))
    sched = build_model_schedule(cfg)
    summary, frames = evaluate_split(
        model, sched, cfg, _manifest_for(cfg, args.split), limit=args.limit
    )
    out = Path(args.out) if args.out else Path(cfg.out_dir) / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": cfg.to_dict(),
        "checkpoint": str(args.checkpoint),
        "split": args.split,
    }
    write_csv(frames, out / "metrics.csv", meta=meta)
    with open(out / "frames.jsonl", "w") as fh:
        for frame in frames:
            fh.write(json.dumps(frame) + "\n")
    (out / "summary.json").write_text(json.dumps({**meta, "summary": summary}, indent=1))
    plot_metrics(frames, out / "metrics.png")
    print(
        f"{args.split}: frames {summary['frames']} rmse {summary['rmse_mm']:.3f} mm "
        f"mae {summary['mae_mm']:.3f} mm rel {summary['rel']:.4f} delta {summary['delta']:.4f}"
    )
    print(f"artifacts under {out}")
    return 0


def cmd_infer(args) -> int:
    if args.point_cloud and None in (args.fx, args.fy, args.cx, args.cy):
        raise SystemExit("error: point cloud export requires --fx --fy --cx --cy")
    model, cfg, payload = load_checkpoint(args.checkpoint, overrides=_eval_overrides(args))
    sched = build_model_schedule(cfg)
    sparsity_seed = (
        args.sparsity_seed if args.sparsity_seed is not None
        else stable_seed(cfg.seed, "infer", Path(args.image).stem)
    )
    sample = load_sample(
        args.image, args.depth,
        n_points=cfg.n_points, sparsity_seed=sparsity_seed,
    )
    outs = predict_sample(model, sched, cfg, sample)
    pred_mm = outs["depth_mm"][0, 0].numpy().astype(np.float32)
    pred = DepthMap(values=pred_mm, mask=np.ones_like(pred_mm, dtype=bool))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config": cfg.to_dict(), "seeds": payload.get("seeds", {}), "source_image": str(args.image)}
    save_depth(pred, out / "pred_depth.png", d_min=cfg.d_min, d_max=cfg.d_max, extra=extra)
    save_depth_figure(pred_mm, out / "pred_depth_fig.png", title="predicted depth (mm)")
    written = [out / "pred_depth.png", out / "pred_depth_fig.png"]

    if sample.depth.mask.any():
        written.append(save_error_map(pred_mm, sample.depth, out / "error_map.png"))
        written.append(save_error_figure(pred_mm, sample.depth, out / "error_map_fig.png"))
    if args.point_cloud:
        intr = Intrinsics(fx=args.fx, fy=args.fy, cx=args.cx, cy=args.cy)
        written.append(
            save_point_cloud(out / "points.ply", pred, intr, image=sample.image, meta=extra)
        )
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_sweep(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint, overrides=_eval_overrides(args))
    sched = build_model_schedule(cfg)
    rows = sparsity_sweep(
        model, sched, cfg, _manifest_for(cfg, args.split),
        levels=_int_list(args.levels),
        seeds=_int_list(args.sweep_seeds),
        limit=args.limit,
    )
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "sweep"
    meta = {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint), "split": args.split}
    write_csv(rows, out / "sweep.csv", meta=meta)
    plot_sweep(rows, out / "sweep.png")
    _print_rows(rows)
    print(f"artifacts under {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = _int_list(args.ablate_seeds)
    rows = run_ablation(cfg, seeds=seeds, limit=args.limit, quiet=args.quiet)
    out = Path(cfg.out_dir)
    meta = {"config": cfg.to_dict(), "seeds": seeds}
    write_csv(rows, out / "ablation.csv", meta=meta)
    plot_ablation(rows, out / "ablation.png")
    _print_rows(rows)
    print(f"artifacts under {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scopedepth",
        description="sparse-to-dense depth completion with recurrent fusion and diffusion refinement",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="render a synthetic tube dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n_train", type=int, default=16)
    p.add_argument("--n_val", type=int, default=2)
    p.add_argument("--n_test", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--d_min", type=float, default=10.0)
    p.add_argument("--d_max", type=float, default=200.0)
    p.add_argument("--focal", type=float, default=0.0, help="focal length px, 0 = image width")
    p.add_argument("--radius", type=float, default=22.0)
    p.add_argument("--straight", action="store_true", help="unperturbed cylinder scenes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("train", help="optimize the full pipeline")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--limit", type=int, default=0, help="max frames, 0 = all")
    p.add_argument("--out", help="artifact directory (default <out_dir>/eval_<split>)")
    add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="single-frame prediction and exports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="RGB input")
    p.add_argument("--depth", required=True, help="16-bit depth PNG used as sparse source (and GT if dense)")
    p.add_argument("--out", default="runs/infer")
    p.add_argument("--sparsity_seed", type=int, default=None)
    p.add_argument("--point_cloud", action="store_true")
    p.add_argument("--fx", type=float, default=None)
    p.add_argument("--fy", type=float, default=None)
    p.add_argument("--cx", type=float, default=None)
    p.add_argument("--cy", type=float, default=None)
    add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sparsity-sweep", help="re-sparsify a split at several densities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--levels", default=",".join(str(v) for v in SWEEP_LEVELS))
    p.add_argument("--sweep_seeds", default="0,1,2,3,4")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", help="artifact directory (default <out_dir>/sweep)")
    add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and score the pipeline variants")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--ablate_seeds", default="0,1,2")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
