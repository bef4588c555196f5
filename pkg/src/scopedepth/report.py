"""Run artifacts: delimited tables, rendered figures, point clouds.

Tables are plain comma-separated files with a single leading comment
line carrying the config snapshot and seeds as JSON, so a table alone
identifies the run that produced it. Figures are rendered next to the
tables they visualize. Point clouds use the ASCII polygon format with
positions in millimeters and 8-bit colors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import DEFAULT_DEPTH_SCALE, DepthMap
from PIL import Image


def write_csv(rows: list[dict], path, meta: dict | None = None) -> Path:
    """Write dict rows as CSV; column order follows the first row."""
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0].keys())
    lines = []
    if meta:
        lines.append("# " + json.dumps(meta, sort_keys=True))
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_cell(row.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n")
    return path


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return '"' + " ".join(str(v) for v in value) + '"'
    return str(value)


def save_error_map(
    pred_mm: np.ndarray, gt: DepthMap, path, scale: float = DEFAULT_DEPTH_SCALE
) -> Path:
    """Raw absolute-error image: 16-bit PNG in `scale` mm units, 0 invalid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    err = np.abs(pred_mm.astype(np.float64) - gt.values)
    raw = np.where(gt.mask, np.clip(np.round(err / scale), 0, 65535), 0).astype(np.uint16)
    Image.fromarray(raw).save(path)
    return path


def save_error_figure(pred_mm: np.ndarray, gt: DepthMap, path, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    err = np.abs(pred_mm.astype(np.float64) - gt.values)
    err = np.where(gt.mask, err, np.nan)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(err, cmap="magma")
    ax.set_title(title or "absolute depth error")
    ax.axis("off")
    fig.colorbar(im, ax=ax, label="mm")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_depth_figure(depth_mm: np.ndarray, path, title: str = "depth") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(depth_mm, cmap="viridis")
    ax.set_title(title)
    ax.axis("off")
    fig.colorbar(im, ax=ax, label="mm")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(frames: list[dict], path) -> Path:
    """Per-frame RMSE bars with the split mean drawn through them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = [f["id"] for f in frames]
    rmse = [f["rmse_mm"] for f in frames]
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(ids)), 4))
    ax.bar(range(len(ids)), rmse, color="#31688e")
    ax.axhline(float(np.mean(rmse)), color="#e05533", linestyle="--", label="mean")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("RMSE (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    levels = [r["n_points"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.errorbar(
        levels, [r["rmse_mm_mean"] for r in rows],
        yerr=[r["rmse_mm_std"] for r in rows], marker="o", capsize=3,
    )
    ax1.set_xscale("log")
    ax1.set_xlabel("sparse points")
    ax1.set_ylabel("RMSE (mm)")
    ax2.errorbar(
        levels, [r["rel_mean"] for r in rows],
        yerr=[r["rel_std"] for r in rows], marker="o", capsize=3, color="#35b779",
    )
    ax2.set_xscale("log")
    ax2.set_xlabel("sparse points")
    ax2.set_ylabel("REL")
    fig.suptitle("sparsity sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [r["variant"] for r in rows]
    rmse = [r["rmse_mm_mean"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.bar(names, rmse, color=["#999999", "#31688e", "#35b779", "#e05533"][: len(names)])
    ax.set_ylabel("RMSE (mm), seed mean")
    ax.set_title("pipeline variants")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curve(log_path, path) -> Path:
    """Loss components against optimizer step, parsed from the JSONL log."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps, curves = [], {"loss": [], "loss_depth": [], "loss_grad": [], "loss_diff": [], "loss_init": []}
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("event") != "step":
                continue
            steps.append(rec["step"])
            for key in curves:
                curves[key].append(rec[key])
    if not steps:
        raise ValueError(f"no step records in {log_path}")
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, values in curves.items():
        if any(v != 0.0 for v in values):
            ax.plot(steps, values, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# point clouds


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx == 0 or self.fy == 0:
            raise ValueError("focal lengths must be nonzero")


def backproject(depth: DepthMap, intr: Intrinsics) -> np.ndarray:
    """Valid pixels to camera-frame points (N, 3) in mm, row-major order.

    x = (u - cx) * z / fx, y = (v - cy) * z / fy, z = depth, with u the
    column index and v the row index.
    """
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    z = depth.values.astype(np.float64)
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    pts = np.stack([x, y, z], axis=-1)
    return pts[depth.mask]


def save_point_cloud(
    path,
    depth: DepthMap,
    intr: Intrinsics,
    image: np.ndarray | None = None,
    meta: dict | None = None,
) -> Path:
    """ASCII PLY of the back-projected depth, colored from the image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = backproject(depth, intr)
    if image is not None:
        colors = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        colors = colors.transpose(1, 2, 0)[depth.mask]
    else:
        colors = np.full((len(pts), 3), 200, dtype=np.uint8)

    lines = [
        "ply",
        "format ascii 1.0",
    ]
    if meta:
        lines.append("comment " + json.dumps(meta, sort_keys=True))
    lines += [
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(pts, colors):
        lines.append(f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {b}")
    path.write_text("\n".join(lines) + "\n")
    return path
