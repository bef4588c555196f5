"""Guidance projection, denoiser contract, and deterministic DDIM sampling."""

import math

import numpy as np
import pytest
import torch

from scopedepth.diffusion import (
    GuidanceProjection,
    NoisePredictor,
    SamplingDivergence,
    ddim_step,
    estimate_x0,
    predict_noise,
    sample,
    timestep_embedding,
)
from scopedepth.schedule import build_schedule, forward_diffuse


def test_guidance_projection_is_linear_per_pixel():
    proj = GuidanceProjection(feat_dim=8)
    with torch.no_grad():
        proj.proj.weight.zero_()
        proj.proj.weight[0, 3, 0, 0] = 2.0
        proj.proj.bias.fill_(0.5)
    h = torch.zeros(1, 8, 4, 4)
    h[0, 3] = 3.0
    out = proj(h)
    assert out.shape == (1, 1, 4, 4)
    assert torch.allclose(out, torch.full((1, 1, 4, 4), 6.5))
    with pytest.raises(ValueError, match="channels"):
        proj(torch.zeros(1, 7, 4, 4))


def test_timestep_embedding_structure():
    t = torch.tensor([0, 10])
    emb = timestep_embedding(t, 8)
    assert emb.shape == (2, 8)
    # t = 0: cos -> 1, sin -> 0
    assert torch.allclose(emb[0, :4], torch.ones(4))
    assert torch.allclose(emb[0, 4:], torch.zeros(4))
    # lowest frequency is 1: leading entries are cos(t), sin(t)
    assert emb[1, 0].item() == pytest.approx(math.cos(10.0), abs=1e-6)
    assert emb[1, 4].item() == pytest.approx(math.sin(10.0), abs=1e-6)
    assert timestep_embedding(t, 7).shape == (2, 7)
    # distinct timesteps embed distinctly
    e = timestep_embedding(torch.arange(50), 16)
    assert torch.pdist(e).min() > 1e-3


def test_noise_predictor_contract():
    net = NoisePredictor(base=8, emb_dim=16)
    x = torch.randn(2, 2, 16, 20)
    out = net(x, 5)
    assert out.shape == (2, 1, 16, 20)
    # scalar, 0-dim tensor, and per-sample tensor timesteps all accepted
    t0 = net(x, torch.tensor(5))
    tb = net(x, torch.tensor([5, 5]))
    assert torch.allclose(out, t0, atol=1e-6)
    assert torch.allclose(out, tb, atol=1e-6)
    with pytest.raises(ValueError, match="channels"):
        net(torch.randn(2, 3, 16, 20), 5)


def test_noise_predictor_odd_sizes_and_dtype():
    net = NoisePredictor(base=8, emb_dim=16)
    # odd spatial sizes exercise the ceil-mode pooling + skip re-matching
    out = net(torch.randn(1, 2, 9, 13), 3)
    assert out.shape == (1, 1, 9, 13)
    x64 = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    out64 = net(x64, 3)
    assert out64.dtype == torch.float64


def test_noise_predictor_depends_on_timestep_and_guidance():
    torch.manual_seed(0)
    net = NoisePredictor(base=8, emb_dim=16)
    x = torch.randn(1, 1, 8, 8)
    g = torch.randn(1, 1, 8, 8)
    a = predict_noise(x, g, 1, net)
    b = predict_noise(x, g, 900, net)
    assert not torch.allclose(a, b)
    c = predict_noise(x, g + 1.0, 1, net)
    assert not torch.allclose(a, c)
    d = predict_noise(x, g, 1, net)
    assert torch.equal(a, d)


def test_predict_noise_validates_inputs():
    net = NoisePredictor(base=8, emb_dim=16)
    x = torch.randn(1, 1, 8, 8)
    with pytest.raises(ValueError, match="guidance"):
        predict_noise(x, torch.randn(1, 1, 8, 9), 0, net)
    bad = x.clone()
    bad[0, 0, 0, 0] = float("inf")
    with pytest.raises(ValueError, match="non-finite"):
        predict_noise(bad, x, 0, net)
    with pytest.raises(ValueError, match="non-finite"):
        predict_noise(x, bad, 0, net)


def test_estimate_x0_inverts_forward_diffusion():
    sched = build_schedule(100, S=4)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 1, 6, 6, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 1, 6, 6, generator=gen, dtype=torch.float64)
    for t in (0, 37, 99):
        x_t = forward_diffuse(x0, t, eps, sched)
        rec = estimate_x0(x_t, eps, t, sched)
        assert torch.allclose(rec, x0, atol=1e-12)
    with pytest.raises(ValueError):
        estimate_x0(x0, eps, 100, sched)


def test_ddim_step_equals_forward_diffuse_of_estimate():
    # with the true noise, stepping t -> t_prev lands exactly on the
    # closed-form noising of x0 at t_prev
    sched = build_schedule(200, S=5)
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn(1, 1, 5, 5, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 1, 5, 5, generator=gen, dtype=torch.float64)
    x_t = forward_diffuse(x0, 150, eps, sched)
    stepped = ddim_step(x_t, eps, 150, 70, sched)
    assert torch.allclose(stepped, forward_diffuse(x0, 70, eps, sched), atol=1e-12)


def test_ddim_step_rejects_non_decreasing_times():
    sched = build_schedule(100, S=4)
    x = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError, match="t_prev"):
        ddim_step(x, x, 10, 10, sched)
    with pytest.raises(ValueError, match="t_prev"):
        ddim_step(x, x, 10, 50, sched)
    with pytest.raises(ValueError):
        ddim_step(x, x, 100, 0, sched)


def test_sample_roundtrip_with_true_noise_oracle():
    # a denoiser that returns the exact noise recovers x0 through the whole
    # chain, and every intermediate state matches the closed form
    sched = build_schedule(1000, S=20)
    gen = torch.Generator().manual_seed(2)
    x0 = torch.randn(1, 1, 16, 20, generator=gen, dtype=torch.float64)
    guidance = torch.zeros_like(x0)
    noise = torch.randn(1, 1, 16, 20, generator=gen, dtype=torch.float64)

    seen = []

    def oracle(x, g, t):
        seen.append((t, x.clone()))
        return noise

    out = sample(x0, guidance, oracle, sched, init_noise=noise)
    rel = (out - x0).norm() / x0.norm()
    assert rel.item() < 1e-12

    assert [t for t, _ in seen] == [int(t) for t in sched.sampling_steps]
    for t, x_t in seen:
        expect = forward_diffuse(x0, t, noise, sched)
        assert torch.allclose(x_t, expect, atol=1e-10)


def test_sample_deterministic_in_seed():
    sched = build_schedule(50, S=5)
    net = NoisePredictor(base=8, emb_dim=16)
    x = torch.randn(1, 1, 8, 8)
    g = torch.randn(1, 1, 8, 8)

    def denoise(xt, gd, t):
        with torch.no_grad():
            return predict_noise(xt, gd, t, net)

    a = sample(x, g, denoise, sched, seed=5)
    b = sample(x, g, denoise, sched, seed=5)
    c = sample(x, g, denoise, sched, seed=6)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sample_validates_shapes():
    sched = build_schedule(50, S=5)
    x = torch.zeros(1, 1, 8, 8)

    def denoise(xt, gd, t):
        return torch.zeros_like(xt)

    with pytest.raises(ValueError, match="guidance"):
        sample(x, torch.zeros(1, 1, 8, 9), denoise, sched)
    with pytest.raises(ValueError, match="init_noise"):
        sample(x, x, denoise, sched, init_noise=torch.zeros(1, 1, 9, 8))

    def bad_denoise(xt, gd, t):
        return torch.zeros(1, 1, 4, 4)

    with pytest.raises(ValueError, match="denoiser returned"):
        sample(x, x, bad_denoise, sched)


def test_sample_divergence_names_the_step():
    sched = build_schedule(50, S=5)
    x = torch.zeros(1, 1, 4, 4)
    calls = []

    def explode(xt, gd, t):
        calls.append(t)
        out = torch.zeros_like(xt)
        if len(calls) == 3:
            out[0, 0, 0, 0] = float("nan")
        return out

    with pytest.raises(SamplingDivergence, match="step 2"):
        sample(x, x, explode, sched)


def test_sample_preserves_dtype():
    sched = build_schedule(50, S=5)

    def denoise(xt, gd, t):
        return torch.zeros_like(xt)

    for dtype in (torch.float32, torch.float64):
        x = torch.randn(1, 1, 6, 6, dtype=dtype)
        out = sample(x, torch.zeros_like(x), denoise, sched, seed=0)
        assert out.dtype == dtype
