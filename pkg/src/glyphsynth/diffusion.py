"""Noise schedule, forward diffusion, DDIM update and the noise-prediction losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError, TimestepError


@dataclass
class NoiseSchedule:
    """Discrete schedule over timesteps ``1..T``; index 0 of the arrays is t=1."""

    T: int
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.T,):
            raise ShapeError(f"expected {self.T} betas, got {self.betas.shape}")
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ConfigError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02, reference_T: int = 1000):
        # endpoints are rescaled so a short chain covers the same total noise as the reference one
        scale = reference_T / T
        return cls(T, np.linspace(beta_start * scale, beta_end * scale, T))

    @classmethod
    def scaled_linear(cls, T: int = 50, beta_start: float = 0.00085, beta_end: float = 0.012,
                      reference_T: int = 1000):
        """Latent-diffusion schedule (linear in sqrt(beta)) defined on ``reference_T``
        steps and subsampled every ``reference_T // T`` steps, as a T-step DDIM
        sampler would see it."""
        if reference_T % T:
            raise ConfigError(f"reference_T={reference_T} is not a multiple of T={T}")
        ref = np.cumprod(1.0 - np.linspace(beta_start**0.5, beta_end**0.5, reference_T) ** 2)
        stride = reference_T // T
        ab = ref[stride - 1::stride]
        prev = np.concatenate([[1.0], ab[:-1]])
        return cls(T, 1.0 - ab / prev)

    @classmethod
    def build(cls, kind: str = "linear", **kw) -> "NoiseSchedule":
        if kind not in ("linear", "scaled_linear"):
            raise ConfigError(f"unknown schedule kind {kind!r}")
        return getattr(cls, kind)(**kw)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at timestep ``t``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        self.check(t)
        return float(self.alpha_bars[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        table = torch.as_tensor(np.concatenate([[1.0], self.alpha_bars]), dtype=like.dtype, device=like.device)
        return table[t.long()]

    def check(self, t, allow_zero: bool = False) -> None:
        tt = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        lo = 0 if allow_zero else 1
        if np.any(tt < lo) or np.any(tt > self.T):
            raise TimestepError(f"timestep out of range [{lo}, {self.T}]: {tt}")

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_1": float(self.betas[0]),
            "beta_T": float(self.betas[-1]),
            "kind": "linear",
            "alpha_bar_T": float(self.alpha_bars[-1]),
        }


def _broadcast_t(schedule: NoiseSchedule, t, z: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = schedule.alpha_bar_tensor(t, z)
        return ab.view(-1, *([1] * (z.ndim - 1)))
    return torch.tensor(schedule.alpha_bar(int(t)), dtype=z.dtype, device=z.device)


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Closed-form forward process q(z_t | z_0); t = 0 returns ``z0``."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    schedule.check(t, allow_zero=True)
    ab = _broadcast_t(schedule, t, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def predict_x0(schedule: NoiseSchedule, z_t: torch.Tensor, eps_hat: torch.Tensor, t) -> torch.Tensor:
    ab = _broadcast_t(schedule, t, z_t)
    return (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_step(
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    eta: float = 0.0,
    noise: torch.Tensor | None = None,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` returns the x0 estimate).

    With ``clip_x0`` the x0 estimate is clamped to ``[-clip_x0, clip_x0]`` and the
    noise direction is re-derived from it. Near ``t = T`` the estimate divides by a
    tiny ``sqrt(alpha_bar)``, so unclipped chains amplify small eps errors.
    """
    if t_prev == t:
        return z_t
    if not (t > t_prev >= 0):
        raise TimestepError(f"DDIM needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    schedule.check(t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0 = (z_t - np.sqrt(1 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
        eps_hat = (z_t - np.sqrt(ab_t) * x0) / np.sqrt(1 - ab_t)
    sigma = eta * np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ConfigError("eta > 0 needs a noise tensor")
        out = out + sigma * noise
    return out


def _check_pair(eps: torch.Tensor, eps_hat: torch.Tensor) -> None:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}")


def loss_sd(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Plain noise-prediction MSE, averaged over every element."""
    _check_pair(eps, eps_hat)
    return ((eps - eps_hat) ** 2).mean()


def weighted_loss_terms(eps, eps_hat, mask, alpha: float):
    """Return ``(total, text_term)`` of the text-area weighted objective.

    ``mask`` is 0 on text and 1 elsewhere, broadcast across channels; the text
    term is a per-element mean like the base term.
    """
    _check_pair(eps, eps_hat)
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    try:
        weight = torch.broadcast_to(1 - mask, eps.shape)
    except RuntimeError as exc:
        raise ShapeError(f"mask {tuple(mask.shape)} does not broadcast to {tuple(eps.shape)}") from exc
    resid = eps - eps_hat
    base = (resid**2).mean()
    text = ((resid * weight) ** 2).mean()
    return base + alpha * text, text


def loss_gd_weighted(eps, eps_hat, mask, alpha: float) -> torch.Tensor:
    return weighted_loss_terms(eps, eps_hat, mask, alpha)[0]
