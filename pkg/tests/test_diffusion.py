import numpy as np
import pytest
import torch

from glyphsynth.diffusion import (
    NoiseSchedule,
    add_noise,
    ddim_step,
    loss_gd_weighted,
    loss_sd,
    predict_x0,
    weighted_loss_terms,
)
from glyphsynth.errors import ConfigError, ShapeError, TimestepError

S = NoiseSchedule.linear(50)


def test_schedule_endpoints():
    assert S.betas[0] == pytest.approx(0.002) and S.betas[-1] == pytest.approx(0.4)
    assert S.alpha_bar(0) == 1.0
    assert np.all(np.diff(S.alpha_bars) < 0)
    with pytest.raises(TimestepError):
        S.alpha_bar(51)


def test_add_noise_limits():
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    assert torch.equal(add_noise(S, z0, 0, eps), z0)
    zt = add_noise(S, torch.zeros_like(z0), 30, eps)
    assert torch.allclose(zt, np.sqrt(1 - S.alpha_bar(30)) * eps, atol=1e-15)
    with pytest.raises(TimestepError):
        add_noise(S, z0, 51, eps)
    with pytest.raises(ShapeError):
        add_noise(S, z0, 3, eps[:1])


def test_add_noise_per_sample_timesteps():
    z0 = torch.randn(3, 1, 2, 2, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = torch.tensor([1, 25, 50])
    out = add_noise(S, z0, t, eps)
    for i in range(3):
        assert torch.allclose(out[i], add_noise(S, z0[i], int(t[i]), eps[i]), atol=1e-15)


def test_add_noise_variance_monte_carlo():
    g = torch.Generator().manual_seed(1)
    n = 10_000
    z0 = 2.0 * torch.randn(n, generator=g, dtype=torch.float64)
    eps = torch.randn(n, generator=g, dtype=torch.float64)
    for t in (5, 20, 45):
        ab = S.alpha_bar(t)
        var = add_noise(S, z0, t, eps).var().item()
        expect = ab * z0.var().item() + (1 - ab)
        assert abs(var - expect) / expect < 0.02


def test_ddim_roundtrip_float64():
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    for t in (1, 10, 35, 50):
        zt = add_noise(S, z0, t, eps)
        assert (predict_x0(S, zt, eps, t) - z0).abs().max() <= 1e-10
        assert (ddim_step(S, zt, eps, t, 0) - z0).abs().max() <= 1e-10


def test_ddim_identity_and_determinism():
    z = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    e = torch.randn_like(z)
    assert ddim_step(S, z, e, 20, 20) is z
    assert torch.equal(ddim_step(S, z, e, 20, 19), ddim_step(S, z, e, 20, 19))
    with pytest.raises(TimestepError):
        ddim_step(S, z, e, 10, 12)


def test_ddim_true_eps_stays_on_trajectory():
    z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    z = add_noise(S, z0, 50, eps)
    for t in range(50, 0, -1):
        z = ddim_step(S, z, eps, t, t - 1)
        assert torch.allclose(z, add_noise(S, z0, t - 1, eps), atol=1e-10)


def _mse_oracle(a, b):
    a, b = a.numpy().ravel(), b.numpy().ravel()
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)


def test_scaled_linear_schedule():
    s = NoiseSchedule.scaled_linear(50)
    ref = np.cumprod(1 - np.linspace(0.00085**0.5, 0.012**0.5, 1000) ** 2)
    assert np.allclose(s.alpha_bars, ref[19::20], rtol=1e-12)
    assert np.all(np.diff(s.betas) > 0)
    assert NoiseSchedule.build("scaled_linear", T=25).T == 25
    with pytest.raises(ConfigError):
        NoiseSchedule.scaled_linear(30)
    with pytest.raises(ConfigError):
        NoiseSchedule.build("cosine")


def test_ddim_clip_x0():
    g = torch.Generator().manual_seed(3)
    z0 = torch.rand(2, 3, 6, 6, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    z = add_noise(S, z0, 30, eps)
    # an in-range estimate is untouched by clipping
    assert torch.allclose(ddim_step(S, z, eps, 30, 29, clip_x0=1.0), ddim_step(S, z, eps, 30, 29), atol=1e-12)
    bad = eps + 0.5
    assert ddim_step(S, z, bad, 30, 0, clip_x0=1.0).abs().max() <= 1.0 + 1e-12
    assert ddim_step(S, z, bad, 30, 0).abs().max() > 1.0


def test_loss_sd_cases():
    e = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert loss_sd(e, e).item() == 0.0
    assert loss_sd(torch.zeros(5, dtype=torch.float64), torch.ones(5, dtype=torch.float64)).item() == 1.0
    f = torch.randn_like(e)
    assert abs(loss_sd(e, f).item() - _mse_oracle(e, f)) <= 1e-12
    with pytest.raises(ShapeError):
        loss_sd(e, f[:1])


def test_weighted_loss_algebra():
    g = torch.Generator().manual_seed(3)
    e = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
    f = torch.randn(e.shape, generator=g, dtype=torch.float64)
    mask = (torch.rand(2, 1, 6, 6, generator=g) > 0.5).double()
    assert loss_gd_weighted(e, f, mask, 0.0).item() == loss_sd(e, f).item()
    total, text = weighted_loss_terms(e, f, torch.ones_like(mask), 0.7)
    assert text.item() == 0.0 and total.item() == loss_sd(e, f).item()
    z = loss_gd_weighted(e, f, torch.zeros_like(mask), 0.5).item()
    assert abs(z - 1.5 * _mse_oracle(e, f)) <= 1e-12
    # general mask against direct summation
    m = torch.broadcast_to(mask, e.shape).numpy().ravel()
    r = (e - f).numpy().ravel()
    oracle = np.mean(r**2) + 0.5 * np.mean((r * (1 - m)) ** 2)
    assert abs(loss_gd_weighted(e, f, mask, 0.5).item() - oracle) <= 1e-12


def test_weighted_loss_bad_mask():
    e = torch.zeros(2, 3, 4, 4)
    with pytest.raises(ShapeError):
        loss_gd_weighted(e, e, torch.ones(2, 1, 5, 5), 0.5)
