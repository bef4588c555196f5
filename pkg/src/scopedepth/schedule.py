"""Diffusion noise schedule and the closed-form forward noising process.

The forward process corrupts a clean signal x_0 over T discrete timesteps.
Its marginal has the closed form

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

with alpha_t = 1 - beta_t and abar_t the running product of alpha up to t.
Deterministic reverse sampling visits only a short sub-sequence of the T
timesteps; that sub-sequence lives on the schedule as ``sampling_steps``.

All schedule tables are float64 so cumulative products stay exact to
double precision; the noising itself is unit-agnostic and runs in whatever
dtype the inputs carry (the rest of the pipeline feeds it depth normalized
to [-1, 1]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise tables plus the reverse-sampling sub-sequence.

    betas, alphas, alpha_bars are length-T float64 arrays; sampling_steps is
    a strictly decreasing length-S integer array running from T-1 down to 0.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sampling_steps: np.ndarray

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)

    @property
    def num_sampling_steps(self) -> int:
        return len(self.sampling_steps)

    def alpha_bar(self, t: int) -> float:
        """abar_t as a python float; raises on out-of-range t."""
        self.check_timestep(t)
        return float(self.alpha_bars[t])

    def check_timestep(self, t: int) -> None:
        if not 0 <= t < self.num_timesteps:
            raise ValueError(
                f"timestep {t} outside [0, {self.num_timesteps})"
            )


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    S: int = 20,
) -> NoiseSchedule:
    """Build a linear beta schedule with an evenly spaced sampling sub-sequence.

    betas are linearly spaced over [beta_start, beta_end]; alpha_bars are the
    cumulative product of (1 - beta); sampling_steps are S timesteps evenly
    spaced over [0, T-1], ordered from T-1 down to 0.
    """
    if not isinstance(T, int) or not isinstance(S, int):
        raise TypeError("T and S must be integers")
    if not T >= S >= 1:
        raise ValueError(f"need T >= S >= 1, got T={T}, S={S}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if S == 1 and T > 1:
        # the sub-sequence must start at T-1 and terminate at 0
        raise ValueError("S == 1 is only valid for T == 1")

    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    steps = np.linspace(T - 1, 0, S)
    sampling_steps = np.round(steps).astype(np.int64)
    if np.any(np.diff(sampling_steps) >= 0):
        raise ValueError(f"sampling sub-sequence not strictly decreasing for T={T}, S={S}")

    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sampling_steps=sampling_steps,
    )


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """Noise a clean signal to timestep t in closed form.

    Returns sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps. Works on any
    array-like supporting scalar multiplication (numpy or torch); x0 and
    eps must share a shape.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
