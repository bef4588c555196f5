"""Recurrent joint refinement of depth and depth gradients.

A ConvGRU runs a fixed number of iterations at quarter resolution. Each
iteration looks at the context features together with the current depth
and gradient estimates and emits residual updates for both, so the two
quantities are forced to stay consistent as they co-evolve. The final
hidden state summarizes the fused estimate and is what conditions the
refinement stage downstream.

Depth and gradients accumulate additively across iterations:

    D_i = D_{i-1} + dD_i,  G_i = G_{i-1} + dG_i,  G_0 = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvGRUCell(nn.Module):
    """Convolutional GRU with 3x3 gates.

    z = sigma(convz([h, x]))      update gate
    r = sigma(convr([h, x]))      reset gate
    q = tanh(convq([r * h, x]))   candidate
    h' = (1 - z) * h + z * q
    """

    def __init__(self, hidden_dim: int, input_dim: int):
        super().__init__()
        self.convz = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)
        self.convr = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)
        self.convq = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


@dataclass
class FusionState:
    hidden: torch.Tensor   # (B, hidden_dim, h, w)
    context: torch.Tensor  # (B, hidden_dim, h, w), static across iterations


@dataclass
class FusionOutput:
    depth: torch.Tensor              # (B, 1, h, w) final accumulated depth
    grads: List[torch.Tensor]        # I tensors (B, 2, h, w), one per iteration
    hidden: torch.Tensor             # final hidden state


class GradFusion(nn.Module):
    def __init__(self, feat_dim: int = 64, hidden_dim: int = 64):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.hidden_proj = nn.Conv2d(feat_dim, hidden_dim, 3, padding=1)
        self.context_proj = nn.Conv2d(feat_dim, hidden_dim, 3, padding=1)
        # input = context + current depth (1) + current gradient (2)
        self.cell = ConvGRUCell(hidden_dim, hidden_dim + 3)
        self.depth_head = nn.Sequential(
            nn.Conv2d(hidden_dim, hidden_dim, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden_dim, 1, 3, padding=1),
        )
        self.grad_head = nn.Sequential(
            nn.Conv2d(hidden_dim, hidden_dim, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden_dim, 2, 3, padding=1),
        )

    def init_state(self, f_quarter: torch.Tensor, d_init: torch.Tensor):
        """Seed the recurrence from backbone features and the coarse depth.

        d_init may be full resolution (it is bilinearly reduced to the
        feature grid) or already quarter resolution. Returns the state
        plus the starting gradient (all zero) and starting depth.
        """
        if f_quarter.shape[0] != d_init.shape[0]:
            raise ValueError(
                f"batch mismatch: features {f_quarter.shape[0]} vs depth {d_init.shape[0]}"
            )
        state = FusionState(
            hidden=torch.tanh(self.hidden_proj(f_quarter)),
            context=F.relu(self.context_proj(f_quarter)),
        )
        if d_init.shape[-2:] != f_quarter.shape[-2:]:
            d_init = F.interpolate(
                d_init, size=f_quarter.shape[-2:], mode="bilinear", align_corners=False
            )
        g0 = torch.zeros(
            d_init.shape[0], 2, *d_init.shape[-2:],
            dtype=d_init.dtype, device=d_init.device,
        )
        return state, g0, d_init

    def gru_step(self, state: FusionState, d_prev: torch.Tensor, g_prev: torch.Tensor):
        """One recurrence; returns (dD, dG, new_hidden). Does not mutate state."""
        x = torch.cat([state.context, d_prev, g_prev], dim=1)
        hidden = self.cell(state.hidden, x)
        return self.depth_head(hidden), self.grad_head(hidden), hidden

    def run_fusion(
        self, state: FusionState, d0: torch.Tensor, g0: torch.Tensor, steps: int
    ) -> FusionOutput:
        """Iterate the GRU `steps` times from (d0, g0).

        Keeps every intermediate gradient estimate (the supervision attaches
        to all of them) but only the final depth and hidden state.
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        depth = d0
        grad = g0
        grads: List[torch.Tensor] = []
        hidden = state.hidden
        for i in range(steps):
            dd, dg, hidden = self.gru_step(
                FusionState(hidden=hidden, context=state.context), depth, grad
            )
            depth = depth + dd
            grad = grad + dg
            if not torch.isfinite(hidden).all():
                raise RuntimeError(f"non-finite fusion state at iteration {i}")
            grads.append(grad)
        return FusionOutput(depth=depth, grads=grads, hidden=hidden)
