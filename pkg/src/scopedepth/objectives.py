"""Training losses, ground-truth gradient construction, evaluation metrics.

Losses operate on torch tensors in normalized depth units and reduce by
masked means, so they are comparable across resolutions and sparsity
levels. Metrics operate on numpy depth maps in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch

from .data import DepthMap


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(x.dtype)
    n = mask.sum()
    if n.item() == 0:
        raise ValueError("empty valid mask")
    return (x * mask).sum() / n


def depth_loss(
    d_pred: torch.Tensor,
    d_final: torch.Tensor,
    d_gt: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Combined L1 + L2 penalty on both full-resolution predictions.

    Mean over valid pixels of
    (d_pred - d)^2 + |d_pred - d| + (d_final - d)^2 + |d_final - d|.
    """
    if d_pred.shape != d_gt.shape or d_final.shape != d_gt.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(d_pred.shape)}, final {tuple(d_final.shape)}, "
            f"gt {tuple(d_gt.shape)}"
        )
    r_pred = d_pred - d_gt
    r_final = d_final - d_gt
    per_pixel = r_pred**2 + r_pred.abs() + r_final**2 + r_final.abs()
    return _masked_mean(per_pixel, mask)


def gradient_loss(
    g_list: list[torch.Tensor],
    g_gt: torch.Tensor,
    g_mask: torch.Tensor,
    gamma: float = 0.9,
) -> torch.Tensor:
    """Decayed L1 supervision over the iteration history of gradient fields.

    sum_i gamma^(I-i) * mean|G_i - G| for i = 1..I, the mean taken over
    valid mask elements; the final iteration carries weight 1.
    """
    if not g_list:
        raise ValueError("empty gradient-field list")
    total = None
    n = len(g_list)
    for i, g in enumerate(g_list, start=1):
        term = gamma ** (n - i) * _masked_mean((g - g_gt).abs(), g_mask)
        total = term if total is None else total + term
    return total


def diffusion_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps_true.shape != eps_pred.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}"
        )
    return ((eps_true - eps_pred) ** 2).mean()


def compute_gt_gradient(
    values: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward-difference depth gradients with both-operand validity.

    values, mask: (..., H, W). Returns (grad, grad_mask), each (..., 2, H, W)
    with channel 0 the difference along rows and channel 1 along columns.
    The last row / column of the respective channel is invalid.
    """
    if values.shape != mask.shape:
        raise ValueError(f"depth/mask shape mismatch: {values.shape} vs {mask.shape}")
    gx = torch.zeros_like(values)
    gy = torch.zeros_like(values)
    gx[..., :-1, :] = values[..., 1:, :] - values[..., :-1, :]
    gy[..., :, :-1] = values[..., :, 1:] - values[..., :, :-1]

    mb = mask.bool()
    mx = torch.zeros_like(mb)
    my = torch.zeros_like(mb)
    mx[..., :-1, :] = mb[..., 1:, :] & mb[..., :-1, :]
    my[..., :, :-1] = mb[..., :, 1:] & mb[..., :, :-1]

    grad = torch.stack([gx, gy], dim=-3)
    grad_mask = torch.stack([mx, my], dim=-3)
    grad = grad * grad_mask.to(grad.dtype)
    return grad, grad_mask


def integrate_gradient(grad: np.ndarray, grad_mask: np.ndarray) -> np.ndarray:
    """Least-squares integration of a gradient field, zero-mean anchored.

    Testing oracle only: recovers the depth map (up to its mean) whose
    forward differences best match the given field. grad and grad_mask are
    (2, H, W); returns (H, W).
    """
    from scipy.sparse import lil_matrix
    from scipy.sparse.linalg import lsqr

    _, h, w = grad.shape
    n = h * w
    rows = []
    vals = []

    def idx(u, v):
        return u * w + v

    eqs = []
    for u in range(h - 1):
        for v in range(w):
            if grad_mask[0, u, v]:
                eqs.append(((idx(u + 1, v), idx(u, v)), grad[0, u, v]))
    for u in range(h):
        for v in range(w - 1):
            if grad_mask[1, u, v]:
                eqs.append(((idx(u, v + 1), idx(u, v)), grad[1, u, v]))

    a = lil_matrix((len(eqs) + 1, n))
    b = np.zeros(len(eqs) + 1)
    for r, ((ip, im), g) in enumerate(eqs):
        a[r, ip] = 1.0
        a[r, im] = -1.0
        b[r] = g
    a[len(eqs), :] = 1.0 / n  # pin the mean to zero
    sol = lsqr(a.tocsr(), b, atol=1e-12, btol=1e-12, iter_lim=20000)[0]
    return sol.reshape(h, w)


@dataclass
class MetricReport:
    """The four depth metrics over valid pixels, depths in millimeters."""

    rmse_mm: float
    mae_mm: float
    rel: float
    delta: float
    n_valid: int

    def to_dict(self) -> dict:
        return asdict(self)


DELTA_THRESHOLD = 1.25


def evaluate(pred: DepthMap, gt: DepthMap) -> MetricReport:
    """RMSE / MAE / REL / delta over pixels valid in both maps.

    delta counts pixels with max(pred/gt, gt/pred) strictly below 1.25.
    Computed in float64; invalid pixels never contribute.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = pred.mask & gt.mask
    if not valid.any():
        raise ValueError("no jointly valid pixels to evaluate")
    g = gt.values[valid].astype(np.float64)
    p = pred.values[valid].astype(np.float64)
    if (g <= 0).any():
        raise ValueError("non-positive ground-truth depth on a valid pixel")

    diff = p - g
    rmse = float(np.sqrt(np.mean(diff**2)))
    mae = float(np.mean(np.abs(diff)))
    rel = float(np.mean(np.abs(diff) / g))
    ratio = np.maximum(p / g, g / p)
    delta = float(np.mean(ratio < DELTA_THRESHOLD))
    return MetricReport(rmse_mm=rmse, mae_mm=mae, rel=rel, delta=delta, n_valid=int(valid.sum()))
