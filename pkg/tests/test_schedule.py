"""Noise schedule tables and the closed-form forward noising."""

import math

import numpy as np
import pytest
import torch

from scopedepth.schedule import NoiseSchedule, build_schedule, forward_diffuse


def test_alpha_bars_match_hand_cumprod():
    # betas 0.1, 0.2, 0.3 -> alphas 0.9, 0.8, 0.7 -> abar 0.9, 0.72, 0.504
    sched = build_schedule(3, beta_start=0.1, beta_end=0.3, S=3)
    assert np.allclose(sched.betas, [0.1, 0.2, 0.3])
    assert np.allclose(sched.alphas, [0.9, 0.8, 0.7])
    assert np.allclose(sched.alpha_bars, [0.9, 0.72, 0.504], atol=1e-15)
    assert sched.alpha_bars.dtype == np.float64


def test_default_schedule_shapes_and_monotonicity():
    sched = build_schedule(1000)
    assert sched.num_timesteps == 1000
    assert sched.num_sampling_steps == 20
    assert sched.betas[0] == pytest.approx(1e-4)
    assert sched.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert 0.0 < sched.alpha_bars[-1] < sched.alpha_bars[0] < 1.0


@pytest.mark.parametrize("T,S", [(1000, 20), (100, 7), (50, 50), (10, 2), (1, 1)])
def test_sampling_steps_properties(T, S):
    sched = build_schedule(T, S=S)
    steps = sched.sampling_steps
    assert len(steps) == S
    assert steps[0] == T - 1
    assert steps[-1] == 0
    if S > 1:
        assert np.all(np.diff(steps) < 0)
        # even spacing up to rounding
        gaps = -np.diff(steps.astype(float))
        ideal = (T - 1) / (S - 1)
        assert np.all(np.abs(gaps - ideal) <= 1.0)


def test_s_equals_t_visits_every_timestep():
    sched = build_schedule(8, S=8)
    assert list(sched.sampling_steps) == [7, 6, 5, 4, 3, 2, 1, 0]


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        build_schedule(10, S=11)
    with pytest.raises(ValueError):
        build_schedule(10, S=0)
    with pytest.raises(ValueError):
        build_schedule(10, S=1)  # cannot both start at 9 and end at 0
    with pytest.raises(TypeError):
        build_schedule(10.0, S=2)
    with pytest.raises(TypeError):
        build_schedule(10, S=2.0)
    with pytest.raises(ValueError):
        build_schedule(10, beta_start=0.0, S=2)
    with pytest.raises(ValueError):
        build_schedule(10, beta_start=0.3, beta_end=0.2, S=2)
    with pytest.raises(ValueError):
        build_schedule(10, beta_end=1.0, S=2)


def test_alpha_bar_range_checked():
    sched = build_schedule(10, S=2)
    sched.alpha_bar(0)
    sched.alpha_bar(9)
    with pytest.raises(ValueError):
        sched.alpha_bar(10)
    with pytest.raises(ValueError):
        sched.alpha_bar(-1)


def test_forward_diffuse_closed_form():
    sched = build_schedule(3, beta_start=0.1, beta_end=0.3, S=3)
    x0 = np.array([1.0, -2.0])
    eps = np.array([0.5, 0.5])
    out = forward_diffuse(x0, 1, eps, sched)
    expect = math.sqrt(0.72) * x0 + math.sqrt(0.28) * eps
    assert np.allclose(out, expect, atol=1e-15)


def test_forward_diffuse_linearity_in_inputs():
    sched = build_schedule(100, S=4)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 5))
    e = rng.standard_normal((5, 5))
    a = forward_diffuse(x, 42, e, sched)
    b = forward_diffuse(2 * x, 42, np.zeros_like(e), sched) / 2
    c = forward_diffuse(np.zeros_like(x), 42, e, sched)
    assert np.allclose(a, 2 * b / 2 + c - b + b)  # a == sqrt(abar) x + sqrt(1-abar) e
    assert np.allclose(a, b + c, atol=1e-12)


def test_forward_diffuse_shape_mismatch_and_dtype():
    sched = build_schedule(10, S=2)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 3)), 5, np.zeros((3, 2)), sched)
    xt = forward_diffuse(torch.zeros(2, 2), 5, torch.ones(2, 2), sched)
    assert isinstance(xt, torch.Tensor) and xt.dtype == torch.float32
    xt64 = forward_diffuse(torch.zeros(2, 2, dtype=torch.float64), 5,
                           torch.ones(2, 2, dtype=torch.float64), sched)
    assert xt64.dtype == torch.float64


def test_schedule_is_frozen():
    sched = build_schedule(10, S=2)
    assert isinstance(sched, NoiseSchedule)
    with pytest.raises(Exception):
        sched.betas = np.zeros(10)
