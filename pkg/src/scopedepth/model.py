"""Composition of the four learned stages and the full inference path.

Pipeline per frame:

    backbone(I, S) -> D_init, F_full, F_quarter
    fusion over F_quarter -> refined quarter depth, gradients, hidden
    guidance = 1x1 projection of the hidden state
    diffusion sampling from noised D_init (quarter res), conditioned on
    the guidance channel
    convex upsample to full res, spatial propagation, denormalize to mm

The ablation switches swap well-defined pieces: no diffusion upsamples
the fusion depth directly, no guidance zeroes the conditioning channel,
no init depth starts sampling from a zero map (pure noise after the
forward diffusion).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneOutput
from .config import RunConfig
from .data import denormalize_depth
from .diffusion import GuidanceProjection, NoisePredictor, predict_noise, sample
from .fusion import FusionOutput, GradFusion
from .refinement import SpatialPropagation, UpsampleWeightHead, convex_upsample
from .schedule import NoiseSchedule, build_schedule


@dataclass
class EncodeOutput:
    backbone: BackboneOutput
    fused: FusionOutput
    guidance: torch.Tensor   # (B, 1, H/4, W/4)
    d0_quarter: torch.Tensor  # (B, 1, H/4, W/4) downsampled initial depth


class DepthCompletion(nn.Module):
    """Backbone + recurrent fusion + conditional diffusion + refinement."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.fusion_steps = cfg.fusion_steps
        self.use_diffusion = cfg.use_diffusion
        self.use_guidance = cfg.use_guidance
        self.use_init_depth = cfg.use_init_depth
        self.d_min = cfg.d_min
        self.d_max = cfg.d_max
        self.backbone = Backbone(
            base=cfg.base_channels,
            feat_full=cfg.feat_full,
            feat_quarter=cfg.feat_quarter,
            d_min=cfg.d_min,
            d_max=cfg.d_max,
        )
        self.fusion = GradFusion(feat_dim=cfg.feat_quarter, hidden_dim=cfg.hidden_dim)
        self.guidance_proj = GuidanceProjection(cfg.hidden_dim)
        self.denoiser = NoisePredictor(base=cfg.denoiser_channels)
        self.up_head = UpsampleWeightHead(feat_dim=cfg.feat_quarter)
        self.spn = SpatialPropagation(feat_dim=cfg.feat_full, iterations=cfg.spn_iterations)

    def encode(
        self,
        image: torch.Tensor,
        sparse_values: torch.Tensor,
        sparse_mask: torch.Tensor,
    ) -> EncodeOutput:
        out = self.backbone(image, sparse_values, sparse_mask)
        state, g0, d0 = self.fusion.init_state(out.f_quarter, out.d_init)
        fused = self.fusion.run_fusion(state, d0, g0, self.fusion_steps)
        guidance = self.guidance_proj(fused.hidden)
        if not self.use_guidance:
            guidance = torch.zeros_like(guidance)
        return EncodeOutput(backbone=out, fused=fused, guidance=guidance, d0_quarter=d0)

    def denoise(self, x_t: torch.Tensor, guidance: torch.Tensor, t) -> torch.Tensor:
        return predict_noise(x_t, guidance, t, self.denoiser)

    def refine(
        self, d_quarter: torch.Tensor, f_quarter: torch.Tensor, f_full: torch.Tensor
    ):
        """Quarter depth -> (full-resolution depth, propagated final depth)."""
        d_full = convex_upsample(d_quarter, self.up_head(f_quarter))
        return d_full, self.spn(d_full, f_full)


def build_model(cfg: RunConfig) -> DepthCompletion:
    return DepthCompletion(cfg)


def build_model_schedule(cfg: RunConfig) -> NoiseSchedule:
    return build_schedule(
        cfg.timesteps,
        beta_start=cfg.beta_start,
        beta_end=cfg.beta_end,
        S=cfg.sampling_steps,
    )


@torch.no_grad()
def predict(
    model: DepthCompletion,
    sched: NoiseSchedule,
    image: torch.Tensor,
    sparse_values: torch.Tensor,
    sparse_mask: torch.Tensor,
    seed: int = 0,
) -> Dict[str, torch.Tensor]:
    """Full inference on a batch; sparse depth in mm, output depth in mm.

    The only stochastic input is the initialization noise, drawn from
    `seed`, so fixed (weights, inputs, seed) give a fixed output.
    """
    was_training = model.training
    model.eval()
    try:
        enc = model.encode(image, sparse_values, sparse_mask)
        if model.use_diffusion:
            x_init = enc.d0_quarter if model.use_init_depth else torch.zeros_like(enc.d0_quarter)
            d_quarter = sample(
                x_init, enc.guidance, model.denoise, sched, seed=seed
            ).clamp(-1.0, 1.0)
        else:
            d_quarter = enc.fused.depth.clamp(-1.0, 1.0)
        d_full, d_final = model.refine(d_quarter, enc.backbone.f_quarter, enc.backbone.f_full)
        d_final = d_final.clamp(-1.0, 1.0)
    finally:
        model.train(was_training)
    return {
        "d_init": enc.backbone.d_init,
        "d_quarter": d_quarter,
        "d_full": d_full,
        "d_final": d_final,
        "guidance": enc.guidance,
        "depth_mm": denormalize_depth(d_final, model.d_min, model.d_max),
    }
