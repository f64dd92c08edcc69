"""Prompt and glyph encoders plus the fusion transformer that builds the
cross-attention condition from ``concat(glyph_tokens, text_tokens)``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

PAD_ID = 0
VOCAB_SIZE = 256


@dataclass
class ConditioningConfig:
    text_len: int = 48  # L_t
    cond_dim: int = 128  # d_c
    text_layers: int = 2
    text_heads: int = 4
    glyph_size: tuple = (32, 32)
    patch: int = 8
    include_class_token: bool = True
    fusion_layers: int = 2
    fusion_heads: int = 4
    seed: int = 0

    @property
    def glyph_len(self) -> int:  # L_g
        h, w = self.glyph_size
        return (h // self.patch) * (w // self.patch) + int(self.include_class_token)

    @classmethod
    def full_scale(cls) -> "ConditioningConfig":
        return cls(text_len=64, cond_dim=1024, glyph_size=(224, 224), patch=14,
                   fusion_layers=6, fusion_heads=8)


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # (L_t, d_c)
    truncated: bool = False


@dataclass
class GlyphEmbedding:
    tokens: torch.Tensor  # (L_g, d_c)


@dataclass
class ConditionBundle:
    e_t: torch.Tensor
    e_g: torch.Tensor
    fused: torch.Tensor  # (L_g + L_t, d_c)


def tokenize(prompt: str, length: int) -> tuple[list[int], bool]:
    """Character-level ids padded/truncated to ``length``."""
    ids = [1 + ord(ch) % (VOCAB_SIZE - 1) for ch in prompt]
    truncated = len(ids) > length
    ids = ids[:length]
    return ids + [PAD_ID] * (length - len(ids)), truncated


def tokenize_batch(prompts, length: int) -> torch.Tensor:
    return torch.tensor([tokenize(p, length)[0] for p in prompts], dtype=torch.long)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(x)), split(self.to_v(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.to_out((attn @ v).transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    """Pre-norm block. With ``zero_init`` both residual branches start at 0,
    so the block is exactly the identity until trained."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, zero_init: bool = False, positions: int = 0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)
        # position code injected into the branch inputs only, so the skip path stays exact
        self.pos = nn.Parameter(torch.randn(positions, dim) * 0.02) if positions else None
        if zero_init:
            for lin in (self.attn.to_out, self.fc2):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x if self.pos is None else x + self.pos[: x.shape[1]]
        x = x + self.attn(self.norm1(h))
        h = x if self.pos is None else x + self.pos[: x.shape[1]]
        return x + self.fc2(F.gelu(self.fc1(self.norm2(h))))


class TextEncoder(nn.Module):
    """Small frozen character-level transformer standing in for a CLIP text tower."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(VOCAB_SIZE, cfg.cond_dim)
        self.register_buffer("positions", sinusoidal_positions(cfg.text_len, cfg.cond_dim), persistent=False)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.cond_dim, cfg.text_heads) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(cfg.cond_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[-1] != self.cfg.text_len:
            raise ShapeError(f"expected {self.cfg.text_len} tokens, got {ids.shape[-1]}")
        x = self.embed(ids) + self.positions.to(self.embed.weight.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def encode(self, prompt: str) -> TextEmbedding:
        ids, truncated = tokenize(prompt, self.cfg.text_len)
        with torch.no_grad():
            tokens = self(torch.tensor([ids]))[0]
        return TextEmbedding(tokens, truncated)


class GlyphEncoder(nn.Module):
    """Frozen patch embedding: non-overlapping patches -> linear -> positions."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        self.cfg = cfg
        h, w = cfg.glyph_size
        if h % cfg.patch or w % cfg.patch:
            raise ShapeError(f"patch {cfg.patch} does not tile {cfg.glyph_size}")
        self.proj = nn.Conv2d(1, cfg.cond_dim, cfg.patch, stride=cfg.patch)
        n = (h // cfg.patch) * (w // cfg.patch)
        self.register_buffer("positions", sinusoidal_positions(n, cfg.cond_dim), persistent=False)
        self.cls = nn.Parameter(torch.randn(1, 1, cfg.cond_dim) * 0.02) if cfg.include_class_token else None
        self.norm = nn.LayerNorm(cfg.cond_dim)

    def forward(self, glyph: torch.Tensor) -> torch.Tensor:
        """``glyph``: (B, 1, H, W) grayscale, white = 1."""
        if tuple(glyph.shape[-2:]) != tuple(self.cfg.glyph_size):
            raise ShapeError(f"glyph must be {self.cfg.glyph_size}, got {tuple(glyph.shape[-2:])}")
        x = self.proj(1.0 - glyph).flatten(2).transpose(1, 2)
        x = x + self.positions.to(x.dtype)
        if self.cls is not None:
            x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1)
        return self.norm(x)

    def encode(self, pixels: np.ndarray) -> GlyphEmbedding:
        g = torch.as_tensor(pixels, dtype=self.proj.weight.dtype)[None, None]
        with torch.no_grad():
            return GlyphEmbedding(self(g)[0])


class Fusion(nn.Module):
    """Transformer over ``concat(e_g, e_t)``; residual branches are zero-initialized."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.glyph_len + cfg.text_len
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.cond_dim, cfg.fusion_heads, zero_init=True, positions=n)
            for _ in range(cfg.fusion_layers)
        )

    def forward(self, e_g: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        if e_g.shape[-1] != e_t.shape[-1] or e_g.shape[-1] != self.cfg.cond_dim:
            raise ShapeError(f"embedding dims differ: {e_g.shape[-1]} vs {e_t.shape[-1]} (d_c={self.cfg.cond_dim})")
        x = torch.cat([e_g, e_t], dim=-2)
        for blk in self.blocks:
            x = blk(x)
        return x


def fuse(fusion: Fusion, e_g, e_t) -> ConditionBundle:
    """Unbatched convenience wrapper returning a ConditionBundle."""
    g = e_g.tokens if isinstance(e_g, GlyphEmbedding) else e_g
    t = e_t.tokens if isinstance(e_t, TextEmbedding) else e_t
    fused = fusion(g[None], t[None])[0]
    return ConditionBundle(e_t=t, e_g=g, fused=fused)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module
