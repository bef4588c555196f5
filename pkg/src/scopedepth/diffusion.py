"""Deterministic diffusion refinement of the quarter-resolution depth.

The denoiser predicts the noise component of a noisy depth map given a
single guidance channel projected from the fusion hidden state. Sampling
follows the deterministic DDIM recurrence (eta = 0) over an evenly spaced
subset of the training timesteps:

    x0_hat   = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    x_{t'}   = sqrt(abar_{t'}) * x0_hat + sqrt(1 - abar_{t'}) * eps

The last step returns x0_hat itself. Given the initial noise, the whole
chain is a pure function of the inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn as nn

from .schedule import NoiseSchedule, forward_diffuse


class SamplingDivergence(RuntimeError):
    """Raised when the sampling chain produces non-finite values."""


class GuidanceProjection(nn.Module):
    """1x1 projection of the fusion hidden state to one guidance channel."""

    def __init__(self, feat_dim: int = 64):
        super().__init__()
        self.feat_dim = feat_dim
        self.proj = nn.Conv2d(feat_dim, 1, 1)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[1] != self.feat_dim:
            raise ValueError(f"expected {self.feat_dim} channels, got {hidden.shape[1]}")
        return self.proj(hidden)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class _TimedBlock(nn.Module):
    """conv -> +time -> norm -> silu -> conv -> norm -> silu, with residual."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, c_out)
        self.norm2 = nn.GroupNorm(4, c_out)
        self.emb = nn.Linear(emb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        y = self.conv1(x) + self.emb(emb)[:, :, None, None]
        y = torch.nn.functional.silu(self.norm1(y))
        y = torch.nn.functional.silu(self.norm2(self.conv2(y)))
        return y + self.skip(x)


class NoisePredictor(nn.Module):
    """Small U-Net over the 2-channel (noisy depth, guidance) input.

    The timestep enters through sinusoidal embeddings added inside each
    block, never as an extra input channel: the spatial input is exactly
    the two channels above.
    """

    IN_CHANNELS = 2

    def __init__(self, base: int = 32, emb_dim: int = 128):
        super().__init__()
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        c1, c2, c3 = base, 2 * base, 4 * base
        self.stem = nn.Conv2d(self.IN_CHANNELS, c1, 3, padding=1)
        self.down1 = _TimedBlock(c1, c2, emb_dim)
        self.down2 = _TimedBlock(c2, c3, emb_dim)
        self.mid = _TimedBlock(c3, c3, emb_dim)
        self.up1 = _TimedBlock(c3 + c2, c2, emb_dim)
        self.up2 = _TimedBlock(c2 + c1, c1, emb_dim)
        self.out = nn.Sequential(
            nn.GroupNorm(4, c1), nn.SiLU(), nn.Conv2d(c1, 1, 3, padding=1)
        )
        self.pool = nn.AvgPool2d(2, ceil_mode=True)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """x (B,2,h,w) noisy depth and guidance stacked; t int or (B,) tensor."""
        if x.shape[1] != self.IN_CHANNELS:
            raise ValueError(f"expected {self.IN_CHANNELS} input channels, got {x.shape[1]}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim))

        in_dtype = x.dtype
        x = x.float()
        s0 = self.stem(x)
        s1 = self.down1(self.pool(s0), emb)
        s2 = self.down2(self.pool(s1), emb)
        m = self.mid(s2, emb)
        u1 = self.up1(torch.cat([_match(m, s1), s1], dim=1), emb)
        u2 = self.up2(torch.cat([_match(u1, s0), s0], dim=1), emb)
        return self.out(u2).to(in_dtype)


def _match(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] == ref.shape[-2:]:
        return x
    return torch.nn.functional.interpolate(
        x, size=ref.shape[-2:], mode="bilinear", align_corners=False
    )


def predict_noise(
    x_t: torch.Tensor, guidance: torch.Tensor, t, net: nn.Module
) -> torch.Tensor:
    """Run the denoiser on the (noisy depth, guidance) concatenation."""
    if x_t.shape != guidance.shape:
        raise ValueError(f"x_t {tuple(x_t.shape)} vs guidance {tuple(guidance.shape)}")
    if not (torch.isfinite(x_t).all() and torch.isfinite(guidance).all()):
        raise ValueError("non-finite denoiser input")
    return net(torch.cat([x_t, guidance], dim=1), t)


def estimate_x0(
    x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward noising at timestep t given a noise estimate."""
    sched.check_timestep(t)
    abar = sched.alpha_bar(t)
    if abar <= 0.0:
        raise ValueError(f"alpha_bar({t}) = {abar}, cannot invert")
    return (x_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def ddim_step(
    x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Deterministic update from timestep t to the earlier timestep t_prev."""
    sched.check_timestep(t)
    sched.check_timestep(t_prev)
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got t={t}, t_prev={t_prev}")
    x0_hat = estimate_x0(x_t, eps_pred, t, sched)
    abar_prev = sched.alpha_bar(t_prev)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_pred


def sample(
    x_init: torch.Tensor,
    guidance: torch.Tensor,
    denoise_fn: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor],
    sched: NoiseSchedule,
    seed: int = 0,
    init_noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Run the full deterministic chain and return the refined prediction.

    x_init is forward-diffused to the first (largest) sampling timestep
    with noise drawn from `seed`, unless `init_noise` is supplied
    explicitly; everything after that is deterministic. Output dtype and
    shape follow x_init.
    """
    if x_init.shape != guidance.shape:
        raise ValueError(f"x_init {tuple(x_init.shape)} vs guidance {tuple(guidance.shape)}")
    steps = sched.sampling_steps
    if init_noise is None:
        gen = torch.Generator().manual_seed(seed)
        init_noise = torch.randn(x_init.shape, generator=gen, dtype=x_init.dtype).to(x_init.device)
    elif init_noise.shape != x_init.shape:
        raise ValueError(f"init_noise {tuple(init_noise.shape)} vs x_init {tuple(x_init.shape)}")

    x = forward_diffuse(x_init, int(steps[0]), init_noise, sched)
    for i, t in enumerate(steps):
        t = int(t)
        eps = denoise_fn(x, guidance, t)
        if eps.shape != x.shape:
            raise ValueError(f"denoiser returned {tuple(eps.shape)} for input {tuple(x.shape)}")
        if i + 1 < len(steps):
            x = ddim_step(x, eps, t, int(steps[i + 1]), sched)
        else:
            x = estimate_x0(x, eps, t, sched)
        if not torch.isfinite(x).all():
            raise SamplingDivergence(f"non-finite state after sampling step {i} (t={t})")
    return x
