"""Joint RGB + sparse-depth encoder-decoder.

A compact convolutional network standing in for a heavyweight pretrained
encoder: it consumes the image together with the sparse depth channel
pair (values, validity mask) and emits the coarse depth estimate plus
features at full and quarter resolution, which downstream stages consume.

Sparse depth additionally enters as a multi-scale masked-average prefill,
so activations stay on a comparable scale whether 50 or 50,000 points are
observed; with zero points the prefill degrades gracefully to the neutral
mid-range value. The coarse depth output is the prefill plus a learned
correction gated by observation coverage, so a fully observed input passes
through exactly and extreme densities stay well behaved.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import normalize_depth


@dataclass
class BackboneOutput:
    d_init: torch.Tensor     # (B, 1, H, W) coarse depth, normalized to [-1, 1]
    f_full: torch.Tensor     # (B, C_f, H, W)
    f_quarter: torch.Tensor  # (B, C_q, H/4, W/4)


def masked_fill_pyramid(values: torch.Tensor, mask: torch.Tensor, levels: int = 6):
    """Dense prior from sparse observations via coarse-to-fine masked averages.

    values, mask: (B, 1, H, W); mask in {0, 1}. Every pixel receives the
    masked average of the finest pyramid level that covers at least one
    observation; pixels with no observation at any level stay 0. Returns
    (fill, coverage) where coverage is the smoothed occupancy in [0, 1].
    """
    num = values * mask
    den = mask.to(values.dtype)
    nums, dens = [num], [den]
    for _ in range(levels):
        if min(nums[-1].shape[-2:]) <= 1:
            break
        nums.append(F.avg_pool2d(nums[-1], 2, ceil_mode=True))
        dens.append(F.avg_pool2d(dens[-1], 2, ceil_mode=True))

    fill = torch.zeros_like(nums[-1])
    have = torch.zeros_like(dens[-1], dtype=torch.bool)
    for num_l, den_l in zip(reversed(nums), reversed(dens)):
        if fill.shape[-2:] != num_l.shape[-2:]:
            fill = F.interpolate(fill, size=num_l.shape[-2:], mode="nearest")
            have = F.interpolate(have.to(values.dtype), size=num_l.shape[-2:], mode="nearest") > 0.5
        local = num_l / den_l.clamp_min(1e-8)
        has_local = den_l > 0
        fill = torch.where(has_local, local, fill)
        have = have | has_local

    coverage_level = min(3, len(dens) - 1)
    coverage = dens[coverage_level].clamp(0.0, 1.0)
    if coverage.shape[-2:] != values.shape[-2:]:
        coverage = F.interpolate(coverage, size=values.shape[-2:], mode="bilinear", align_corners=False)
    return fill, coverage


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(4, c_out),
        nn.ReLU(inplace=True),
    )


class _ResBlock(nn.Module):
    def __init__(self, channels: int, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, channels)
        self.norm2 = nn.GroupNorm(4, channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class Backbone(nn.Module):
    """Three-level encoder-decoder over the fused image/sparse input."""

    def __init__(
        self,
        base: int = 24,
        feat_full: int = 32,
        feat_quarter: int = 64,
        d_min: float = 10.0,
        d_max: float = 200.0,
    ):
        super().__init__()
        self.d_min = float(d_min)
        self.d_max = float(d_max)
        c1, c2, c3 = 2 * base, 3 * base, feat_quarter
        self.rgb_stem = _conv_block(3, base)
        self.sparse_stem = _conv_block(4, base)

        self.enc1 = _conv_block(2 * base, c1)
        self.enc2 = _conv_block(c1, c2, stride=2)
        self.enc3 = _conv_block(c2, c3, stride=2)
        self.trunk = nn.Sequential(
            _ResBlock(c3, dilation=1),
            _ResBlock(c3, dilation=2),
            _ResBlock(c3, dilation=4),
            _ResBlock(c3, dilation=8),
        )

        self.dec2 = _conv_block(c3 + c2, c2)
        self.dec1 = _conv_block(c2 + c1, c1)

        self.depth_head = nn.Sequential(
            nn.Conv2d(c1, c1, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, 1, 3, padding=1),
        )
        self.feat_full_head = nn.Conv2d(c1, feat_full, 3, padding=1)

    def forward(
        self,
        image: torch.Tensor,
        sparse_values: torch.Tensor,
        sparse_mask: torch.Tensor,
    ) -> BackboneOutput:
        """image (B,3,H,W) in [0,1]; sparse values in mm, ignored where mask is 0."""
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input resolution {h}x{w} not divisible by 4")
        if image.shape[-2:] != sparse_values.shape[-2:]:
            raise ValueError(
                f"image {tuple(image.shape[-2:])} vs sparse {tuple(sparse_values.shape[-2:])}"
            )

        mask = sparse_mask.to(sparse_values.dtype)
        if float((sparse_values * mask).min()) < 0:
            raise ValueError("sparse depth contains negative values at valid pixels")
        sparse_norm = normalize_depth(sparse_values, self.d_min, self.d_max) * mask
        fill, coverage = masked_fill_pyramid(sparse_norm, mask)
        s = self.sparse_stem(torch.cat([sparse_norm, mask, fill, coverage], dim=1))
        r = self.rgb_stem(image)

        e1 = self.enc1(torch.cat([r, s], dim=1))
        e2 = self.enc2(e1)
        e3 = self.trunk(self.enc3(e2))

        d2 = self.dec2(torch.cat([_up(e3, e2), e2], dim=1))
        d1 = self.dec1(torch.cat([_up(d2, e1), e1], dim=1))

        # The coarse estimate is a correction on top of the prefill prior,
        # gated by coverage: densely observed regions pass the measured
        # average through, sparse regions rely on the learned term. Keeps
        # the estimate usable at densities far from the training sparsity.
        correction = self.depth_head(d1)
        d_init = (fill + (1.0 - coverage) * correction).clamp(-1.0, 1.0)
        return BackboneOutput(
            d_init=d_init,
            f_full=self.feat_full_head(d1),
            f_quarter=e3,
        )


def _up(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)
