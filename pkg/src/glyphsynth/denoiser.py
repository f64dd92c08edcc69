"""Conditional UNet noise predictor.

``BaseDenoiser`` sees ``(z_t, t, e_t)``. ``GlyphDenoiser`` is built from a
base model: its conv-in takes two extra planes (glyph, mask) whose weights
start at zero, and its condition is the fused ``[e_g; e_t]`` sequence.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditioningConfig, Fusion, GlyphEncoder, TextEncoder, freeze, tokenize_batch
from .errors import ConfigError, ShapeError, TimestepError


@dataclass
class UNetConfig:
    latent_channels: int = 3
    widths: tuple = (64, 128)
    attn_dim: int = 64  # d, the query/key width
    time_dim: int = 128
    groups: int = 8
    num_timesteps: int = 50
    # self-attention over every top-resolution pixel dominates CPU cost
    top_self_attention: bool = False
    cond: ConditioningConfig = field(default_factory=ConditioningConfig)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if isinstance(self.cond, dict):
            self.cond = ConditioningConfig(**self.cond)
        if len(self.widths) < 1 or min(self.widths) <= 0:
            raise ConfigError(f"bad widths {self.widths}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freq[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ConvIn(nn.Module):
    """3x3 stem over ``c + aux`` channels, evaluated as two convolutions so that
    zero auxiliary weights leave the latent path bit-identical to the base stem."""

    def __init__(self, latent_channels: int, aux_channels: int, width: int):
        super().__init__()
        self.latent_channels = latent_channels
        self.aux_channels = aux_channels
        base = nn.Conv2d(latent_channels, width, 3, padding=1)
        w = torch.zeros(width, latent_channels + aux_channels, 3, 3)
        w[:, :latent_channels] = base.weight.detach()
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(base.bias.detach().clone())

    def forward(self, z: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        c = self.latent_channels
        if z.shape[1] != c:
            raise ShapeError(f"conv_in expects {c} latent channels, got {z.shape[1]}")
        out = F.conv2d(z, self.weight[:, :c], self.bias, padding=1)
        if self.aux_channels:
            if aux is None or aux.shape[1] != self.aux_channels:
                got = None if aux is None else aux.shape[1]
                raise ShapeError(f"conv_in expects {self.aux_channels} auxiliary channels, got {got}")
            out = out + F.conv2d(aux, self.weight[:, c:], None, padding=1)
        return out

    @classmethod
    def widened(cls, base: "ConvIn", aux_channels: int) -> "ConvIn":
        new = cls(base.latent_channels, aux_channels, base.weight.shape[0])
        with torch.no_grad():
            new.weight.zero_()
            new.weight[:, : base.latent_channels] = base.weight[:, : base.latent_channels]
            new.bias.copy_(base.bias)
        return new.to(base.weight.dtype)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention; queries from features, keys
    and values from the condition sequence."""

    def __init__(self, query_dim: int, context_dim: int, attn_dim: int):
        super().__init__()
        self.attn_dim = attn_dim
        self.to_q = nn.Linear(query_dim, attn_dim, bias=False)
        self.to_k = nn.Linear(context_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(context_dim, attn_dim, bias=False)
        self.to_out = nn.Linear(attn_dim, query_dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if context.shape[-1] != self.to_k.in_features:
            raise ShapeError(f"context dim {context.shape[-1]} != {self.to_k.in_features}")
        if x.shape[-1] != self.to_q.in_features:
            raise ShapeError(f"feature dim {x.shape[-1]} != {self.to_q.in_features}")
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        weights = torch.softmax((q / math.sqrt(self.attn_dim)) @ k.transpose(-1, -2), dim=-1)
        return self.to_out(weights @ v)


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention and feed-forward over flattened pixels."""

    def __init__(self, ch: int, context_dim: int, attn_dim: int, groups: int, self_attention: bool = True):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, ch), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.norm1 = nn.LayerNorm(ch) if self_attention else None
        self.self_attn = CrossAttention(ch, ch, attn_dim) if self_attention else None
        self.norm2 = nn.LayerNorm(ch)
        self.cross = CrossAttention(ch, context_dim, attn_dim)
        self.norm3 = nn.LayerNorm(ch)
        self.ff1 = nn.Linear(ch, 2 * ch)
        self.ff2 = nn.Linear(2 * ch, ch)
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        y = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        if self.self_attn is not None:
            n = self.norm1(y)
            y = y + self.self_attn(n, n)
        y = cross_attention(self.cross, self.norm2(y), context, residual=y)
        y = y + self.ff2(F.gelu(self.ff1(self.norm3(y))))
        return x + self.proj_out(y.transpose(1, 2).reshape(b, c, h, w))


def cross_attention(block: CrossAttention, features: torch.Tensor, context: torch.Tensor, residual=None):
    """``residual + Attention(W_Q f, W_K C, W_V C)`` projected back to the feature width."""
    base = features if residual is None else residual
    return base + block(features, context)


class UNet(nn.Module):
    """Two-level (or deeper) UNet; one spatial transformer per resolution."""

    def __init__(self, cfg: UNetConfig, aux_channels: int = 0):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        cd = cfg.cond.cond_dim
        self.time_embed = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = ConvIn(cfg.latent_channels, aux_channels, w[0])
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i, ch in enumerate(w):
            prev = w[i - 1] if i else w[0]
            self.down.append(ResBlock(prev, ch, cfg.time_dim, cfg.groups))
            if i < len(w) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(w[-1], w[-1], cfg.time_dim, cfg.groups)
        self.mid_attn = SpatialTransformer(w[-1], cd, cfg.attn_dim, cfg.groups)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(w))):
            nxt = w[i]
            below = w[-1] if i == len(w) - 1 else w[i + 1]
            self.up.append(ResBlock(below + w[i], nxt, cfg.time_dim, cfg.groups))
            if i > 0:
                self.upsample.append(nn.Conv2d(nxt, nxt, 3, padding=1))
        # top-resolution attention sits on the decoder path, next to the output
        self.up_attn = SpatialTransformer(w[0], cd, cfg.attn_dim, cfg.groups, self_attention=cfg.top_self_attention)
        self.norm_out = nn.GroupNorm(min(cfg.groups, w[0]), w[0])
        self.conv_out = nn.Conv2d(w[0], cfg.latent_channels, 3, padding=1)

    def attention_blocks(self) -> list[SpatialTransformer]:
        return [self.mid_attn, self.up_attn]

    def forward(self, z, t, context, aux=None, return_features: bool = False):
        temb = self.time_embed(timestep_embedding(t, self.cfg.time_dim).to(z.dtype))
        h = self.conv_in(z, aux)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, temb)
        h = self.mid_attn(h, context)
        for j, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up_attn(h, context)
        features = F.silu(self.norm_out(h))
        out = self.conv_out(features)
        return (out, features) if return_features else out


def _as_t(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(batch)
    return t.long()


class BaseDenoiser(nn.Module):
    """Text-conditioned denoiser playing the role of the pretrained base model."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.text_encoder = freeze(TextEncoder(cfg.cond))
            self.unet = UNet(cfg, aux_channels=0)

    def encode_prompts(self, prompts) -> torch.Tensor:
        ids = tokenize_batch(prompts, self.cfg.cond.text_len)
        with torch.no_grad():
            return self.text_encoder(ids)

    def check_t(self, t) -> torch.Tensor:
        tt = torch.as_tensor(t)
        if torch.any(tt < 1) or torch.any(tt > self.cfg.num_timesteps):
            raise TimestepError(f"timestep out of range [1, {self.cfg.num_timesteps}]")
        return tt

    def forward(self, z_t, t, e_t, return_features: bool = False):
        self.check_t(t)
        return self.unet(z_t, _as_t(t, z_t.shape[0]), e_t, return_features=return_features)


class GlyphDenoiser(nn.Module):
    """Base denoiser extended with glyph/mask input planes and a fused condition."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.text_encoder = freeze(TextEncoder(cfg.cond))
            self.unet = UNet(cfg, aux_channels=2)
            torch.manual_seed(cfg.seed + 1)
            self.glyph_encoder = freeze(GlyphEncoder(cfg.cond))
            self.fusion = Fusion(cfg.cond)
        self.trained = False

    @classmethod
    def from_base(cls, base: BaseDenoiser) -> "GlyphDenoiser":
        model = cls(copy.deepcopy(base.cfg))
        dtype = next(base.parameters()).dtype
        model = model.to(dtype)
        model.text_encoder.load_state_dict(base.text_encoder.state_dict())
        state = {k: v for k, v in base.unet.state_dict().items() if not k.startswith("conv_in.")}
        missing, unexpected = model.unet.load_state_dict(state, strict=False)
        assert not unexpected and set(missing) == {"conv_in.weight", "conv_in.bias"}, (missing, unexpected)
        model.unet.conv_in = ConvIn.widened(base.unet.conv_in, 2)
        return model

    @property
    def conv_in(self) -> ConvIn:
        return self.unet.conv_in

    def encode_prompts(self, prompts) -> torch.Tensor:
        ids = tokenize_batch(prompts, self.cfg.cond.text_len)
        with torch.no_grad():
            return self.text_encoder(ids)

    def encode_glyphs(self, glyphs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.glyph_encoder(glyphs)

    def condition(self, e_g: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        return self.fusion(e_g, e_t)

    check_t = BaseDenoiser.check_t

    def forward(self, z_t, t, cond, glyph_lat, mask_lat, mask_glyph_tokens: bool = False, return_features: bool = False):
        """``cond`` is the fused condition; glyph/mask planes are (B, 1, h, w)."""
        self.check_t(t)
        if glyph_lat.shape[-2:] != z_t.shape[-2:] or mask_lat.shape[-2:] != z_t.shape[-2:]:
            raise ShapeError("auxiliary planes must match the latent resolution")
        if mask_glyph_tokens:
            cond = cond[:, self.cfg.cond.glyph_len:]
        aux = torch.cat([glyph_lat, mask_lat], dim=1)
        return self.unet(z_t, _as_t(t, z_t.shape[0]), cond, aux=aux, return_features=return_features)


def predict_noise(model: GlyphDenoiser, z_t, t, cond, glyph_lat, mask_lat, **kw):
    return model(z_t, t, cond, glyph_lat, mask_lat, **kw)
