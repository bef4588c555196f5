"""Full-resolution recovery: convex upsampling, then local propagation.

Convex upsampling writes each fine pixel as a learned convex combination
of the 3x3 coarse neighborhood around its parent cell, so upsampled
values can never escape the local range of the coarse map. Spatial
propagation then iterates a residual update with non-negative neighbor
affinities that sum to at most one per pixel:

    D' = D + sum_k w_k * (D_k - D)

which keeps constant regions exactly constant and never amplifies the
local value range.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

# row-major 3x3 neighborhood without the center
NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _unfold3x3(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, 9, H, W) of replicate-padded 3x3 patches."""
    b, c, h, w = x.shape
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    patches = F.unfold(padded, kernel_size=3)  # (B, C*9, H*W)
    return patches.view(b, c, 9, h, w)


def convex_upsample(coarse: torch.Tensor, logits: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Upsample (B, C, h, w) by `factor` using per-pixel convex weights.

    logits has 9 * factor**2 channels: a weight over the 3x3 coarse
    neighborhood for each fine sub-pixel. Softmax guarantees convexity;
    the result is additionally clamped to the local neighborhood min/max
    so the bound survives floating-point summation exactly.
    """
    b, c, h, w = coarse.shape
    if logits.shape != (b, 9 * factor * factor, h, w):
        raise ValueError(
            f"logits shape {tuple(logits.shape)}, expected {(b, 9 * factor * factor, h, w)}"
        )
    weights = torch.softmax(logits.view(b, 1, 9, factor, factor, h, w), dim=2)

    patches = _unfold3x3(coarse)  # (B, C, 9, h, w)
    lo = patches.amin(dim=2)
    hi = patches.amax(dim=2)
    patches = patches.view(b, c, 9, 1, 1, h, w)

    up = (weights * patches).sum(dim=2)  # (B, C, factor, factor, h, w)
    up = torch.minimum(torch.maximum(up, lo[:, :, None, None]), hi[:, :, None, None])
    up = up.permute(0, 1, 4, 2, 5, 3)  # (B, C, h, factor, w, factor)
    return up.reshape(b, c, factor * h, factor * w)


class UpsampleWeightHead(nn.Module):
    """Predicts convex-combination logits from quarter-resolution features."""

    def __init__(self, feat_dim: int = 64, factor: int = 4, mid: int = 128):
        super().__init__()
        self.factor = factor
        self.net = nn.Sequential(
            nn.Conv2d(feat_dim, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, 9 * factor * factor, 1),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.net(feat)


def propagate(depth: torch.Tensor, weights: torch.Tensor, iterations: int) -> torch.Tensor:
    """Iterate the residual neighbor update with fixed affinities.

    depth (B, 1, H, W); weights (B, 8, H, W) ordered as NEIGHBOR_OFFSETS.
    Weights must be non-negative with per-pixel sum <= 1 (the remainder
    implicitly stays on the center pixel).
    """
    if weights.shape[1] != 8:
        raise ValueError(f"expected 8 neighbor weights, got {weights.shape[1]}")
    w = weights.detach()
    if float(w.min()) < -1e-6:
        raise ValueError("negative neighbor affinity")
    wsum_max = float(w.sum(dim=1).max())
    if wsum_max > 1.0 + 1e-5:
        raise ValueError(f"neighbor affinities sum to {wsum_max:.6f} > 1")

    out = depth
    for _ in range(iterations):
        patches = _unfold3x3(out)[:, 0]  # (B, 9, H, W)
        neighbors = torch.cat([patches[:, :4], patches[:, 5:]], dim=1)
        out = out + (weights * (neighbors - out)).sum(dim=1, keepdim=True)
    return out


class SpatialPropagation(nn.Module):
    """Affinity head + iterated propagation, conditioned on image features."""

    def __init__(self, feat_dim: int = 32, iterations: int = 6, mid: int = 32):
        super().__init__()
        self.iterations = iterations
        self.affinity = nn.Sequential(
            nn.Conv2d(feat_dim, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, 9, 1),
        )

    def neighbor_weights(self, feat: torch.Tensor) -> torch.Tensor:
        """Softmax over the 9-way choice, center weight dropped (implicit)."""
        w = torch.softmax(self.affinity(feat), dim=1)
        return torch.cat([w[:, :4], w[:, 5:]], dim=1)

    def forward(self, depth: torch.Tensor, feat: torch.Tensor, iterations: int = None) -> torch.Tensor:
        if depth.shape[-2:] != feat.shape[-2:]:
            raise ValueError(
                f"depth {tuple(depth.shape[-2:])} vs features {tuple(feat.shape[-2:])}"
            )
        n = self.iterations if iterations is None else iterations
        return propagate(depth, self.neighbor_weights(feat), n)
