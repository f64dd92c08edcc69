"""Fixed latent codecs: images in [0, 1] <-> latents roughly in [-1, 1]."""
from __future__ import annotations

import torch
import torch.nn.functional as F


class PixelCodec:
    """Identity codec up to an affine rescale (f = 1)."""

    factor = 1

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return 2.0 * x - 1.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


class PoolCodec:
    """Average-pool encoder / nearest-unpool decoder with downsampling factor ``f``."""

    def __init__(self, factor: int = 2):
        self.factor = factor

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return 2.0 * F.avg_pool2d(x, self.factor) - 1.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return ((F.interpolate(z, scale_factor=self.factor, mode="nearest") + 1.0) / 2.0).clamp(0.0, 1.0)


def make_codec(factor: int):
    return PixelCodec() if factor == 1 else PoolCodec(factor)
