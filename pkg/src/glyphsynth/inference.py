"""Two-phase sampling: estimate a text mask from a short early trajectory, then
run a fresh DDIM chain whose first steps use the glyph-conditioned denoiser
and whose remaining steps use the text-only base denoiser."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .codec import PixelCodec
from .diffusion import NoiseSchedule, ddim_step, predict_x0
from .errors import ConfigError
from .glyph_assets import (
    GlyphAtlas,
    LocationMask,
    QuadRegion,
    random_quad,
    rasterize_mask,
    render_glyph,
    to_latent_resolution,
)

MASK_SOURCES = ("predicted", "user", "all_ones", "random")
PHASE_ESTIMATE, PHASE_GENERATE = 0, 1


@dataclass
class SamplerConfig:
    T: int = 50
    t_early: int = 35
    r: float = 0.5  # fraction of the chain given to the glyph-conditioned model
    mask_source: str = "predicted"
    seed: int = 0
    eta: float = 0.0
    guidance_scale: float = 1.0
    mask_threshold: float = 0.5
    clip_x0: float | None = 1.0  # clamp of the x0 estimate inside each DDIM step

    def __post_init__(self):
        if not 1 <= self.t_early <= self.T:
            raise ConfigError(f"t_early must lie in [1, T={self.T}], got {self.t_early}")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"r must lie in [0, 1], got {self.r}")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")

    @property
    def glyph_steps(self) -> int:
        return glyph_step_count(self.T, self.r)


@dataclass
class GenerationRequest:
    prompt: str
    text: str = ""
    quad: QuadRegion | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


def glyph_step_count(T: int, r: float) -> int:
    return int(math.floor(r * T + 1e-9))


def step_plan(T: int, r: float) -> list[tuple[int, str]]:
    """``(t, model)`` for t = T..1: the first floor(rT) steps use the glyph model."""
    n = glyph_step_count(T, r)
    return [(t, "glyph" if T - t < n else "base") for t in range(T, 0, -1)]


def derive_seed(seed: int, phase: int) -> int:
    return (int(seed) * 1_000_003 + phase) % (2**63)


def request_noise(seeds, phase: int, shape, dtype) -> torch.Tensor:
    out = []
    for s in seeds:
        g = torch.Generator().manual_seed(derive_seed(s, phase))
        out.append(torch.randn(shape, generator=g, dtype=dtype))
    return torch.stack(out)


def mask_features(x0: torch.Tensor, tap: str) -> torch.Tensor:
    """Per-pixel inputs of the mask predictor derived from the x0 estimate.

    ``x0_context`` appends box averages over 3, 5 and 9 pixels so that a
    pixel-wise MLP can see whether it sits inside a run of strokes.
    """
    x0 = x0.clamp(-1.0, 1.0)
    if tap == "x0":
        return x0
    if tap == "x0_context":
        pooled = [F.avg_pool2d(x0, k, 1, k // 2, count_include_pad=False) for k in (3, 5, 9)]
        return torch.cat([x0, *pooled], dim=1)
    raise ConfigError(f"unknown feature tap {tap!r}")


def early_phase(model, schedule: NoiseSchedule, e_t, e_g, glyph_lat, noise, t_early: int,
                feature_tap: str = "features", clip_x0: float | None = 1.0):
    """Denoise from ``noise`` over t = T..t_early+1 with an all-ones mask.

    Returns ``(z_{t_early}, per-pixel features, number of denoiser calls)``;
    features come from the last evaluation.
    """
    cond = model.condition(e_g, e_t)
    ones = torch.ones_like(glyph_lat)
    z, feats, calls = noise, None, 0
    for t in range(schedule.T, t_early, -1):
        eps, feats = model(z, t, cond, glyph_lat, ones, return_features=True)
        calls += 1
        if feature_tap != "features":
            feats = mask_features(predict_x0(schedule, z, eps, t), feature_tap)
        z = ddim_step(schedule, z, eps, t, t - 1, clip_x0=clip_x0)
    return z, feats, calls


class GlyphPipeline:
    """Bundles the two denoisers, schedule, codec and glyph atlas for sampling."""

    def __init__(self, glyph_model, base_model, schedule: NoiseSchedule, atlas: GlyphAtlas,
                 image_size: tuple[int, int], codec=None, mask_predictor=None):
        for name, m in (("glyph", glyph_model), ("base", base_model)):
            if m is not None and m.cfg.num_timesteps != schedule.T:
                raise ConfigError(f"{name} model expects T={m.cfg.num_timesteps}, schedule has T={schedule.T}")
        self.glyph_model = glyph_model
        self.base_model = base_model
        self.schedule = schedule
        self.atlas = atlas
        self.image_size = tuple(image_size)
        self.codec = codec or PixelCodec()
        self.mask_predictor = mask_predictor
        self.calls = {"estimate": 0, "glyph": 0, "base": 0}

    # ------------------------------------------------------------ helpers
    @property
    def latent_size(self) -> tuple[int, int]:
        f = self.codec.factor
        return self.image_size[0] // f, self.image_size[1] // f

    @property
    def dtype(self):
        return next(self.glyph_model.parameters()).dtype

    def reset_counts(self) -> None:
        for k in self.calls:
            self.calls[k] = 0

    def _check(self, sampler: SamplerConfig) -> None:
        if sampler.T != self.schedule.T:
            raise ConfigError(f"sampler T={sampler.T} differs from schedule T={self.schedule.T}")

    def glyph_planes(self, texts) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.codec.factor
        full, lat = [], []
        for text in texts:
            g = render_glyph(text, self.image_size, self.atlas)
            full.append(g.pixels)
            lat.append(to_latent_resolution(g, f).pixels)
        as_t = lambda a: torch.tensor(np.stack(a), dtype=self.dtype)[:, None]
        return as_t(full), as_t(lat)

    def mask_from_quad(self, quad: QuadRegion) -> torch.Tensor:
        m = to_latent_resolution(rasterize_mask(quad, self.image_size), self.codec.factor)
        return torch.tensor(m.pixels, dtype=self.dtype)[None]

    def _noise_shape(self):
        return (self.glyph_model.cfg.latent_channels, *self.latent_size)

    # ------------------------------------------------------------ phase 1
    def estimate_masks(self, reqs) -> torch.Tensor:
        """Latent-resolution masks from the mask predictor; empty texts get
        all-ones masks without any denoiser call."""
        h, w = self.latent_size
        out = torch.ones(len(reqs), 1, h, w, dtype=self.dtype)
        todo = [i for i, r in enumerate(reqs) if r.text]
        if not todo:
            return out
        if self.mask_predictor is None:
            raise ConfigError("predicted masks need a mask predictor")
        sub = [reqs[i] for i in todo]
        for r in sub:
            self._check(r.sampler)
        t_early = sub[0].sampler.t_early
        thr = sub[0].sampler.mask_threshold
        model = self.glyph_model
        e_t = model.encode_prompts([r.prompt for r in sub]).to(self.dtype)
        full, lat = self.glyph_planes([r.text for r in sub])
        e_g = model.encode_glyphs(full)
        noise = request_noise([r.sampler.seed for r in sub], PHASE_ESTIMATE, self._noise_shape(), self.dtype)
        with torch.no_grad():
            _, feats, calls = early_phase(model, self.schedule, e_t, e_g, lat, noise, t_early,
                                          self.mask_predictor.feature_tap, sub[0].sampler.clip_x0)
            prob = self.mask_predictor(feats)
        self.calls["estimate"] += calls
        out[todo] = (prob >= thr).to(self.dtype)
        return out

    def estimate_mask(self, req: GenerationRequest) -> LocationMask:
        return LocationMask(self.estimate_masks([req])[0, 0].double().numpy())

    def resolve_masks(self, reqs) -> torch.Tensor:
        masks = []
        pending = [i for i, r in enumerate(reqs) if r.text and r.sampler.mask_source == "predicted"]
        predicted = self.estimate_masks([reqs[i] for i in pending]) if pending else None
        h, w = self.latent_size
        for i, r in enumerate(reqs):
            src = r.sampler.mask_source
            if not r.text or src == "all_ones":
                masks.append(torch.ones(1, h, w, dtype=self.dtype))
            elif src == "predicted":
                masks.append(predicted[pending.index(i)])
            elif src == "user":
                if r.quad is None:
                    raise ConfigError("mask_source=user needs a quad")
                masks.append(self.mask_from_quad(r.quad))
            else:
                masks.append(self.mask_from_quad(random_quad(derive_seed(r.sampler.seed, 7), self.image_size)))
        return torch.stack(masks)

    # ------------------------------------------------------------ phase 2
    def _guided(self, fn, cond, uncond, scale):
        if scale == 1.0:
            return fn(cond)
        e_c, e_u = fn(cond), fn(uncond)
        return e_u + scale * (e_c - e_u)

    def generate_batch(self, reqs, masks: torch.Tensor | None = None) -> np.ndarray:
        """Images (B, H, W, 3) in [0, 1]; ``masks`` are latent-resolution (B, 1, h, w)."""
        if not reqs:
            return np.zeros((0, *self.image_size, 3))
        sampler = reqs[0].sampler
        for r in reqs:
            self._check(r.sampler)
            if (r.sampler.r, r.sampler.eta, r.sampler.guidance_scale, r.sampler.clip_x0) != \
                    (sampler.r, sampler.eta, sampler.guidance_scale, sampler.clip_x0):
                raise ConfigError("batched requests must share r, eta, guidance scale and clip_x0")
        if masks is None:
            masks = self.resolve_masks(reqs)
        masks = masks.to(self.dtype).clone()
        empty = torch.tensor([not r.text for r in reqs])
        masks[empty] = 1.0
        gm, bm = self.glyph_model, self.base_model
        prompts = [r.prompt for r in reqs]
        plan = step_plan(sampler.T, sampler.r)
        need_glyph = any(kind == "glyph" for _, kind in plan)
        need_base = any(kind == "base" for _, kind in plan)
        scale = sampler.guidance_scale
        full, lat = self.glyph_planes([r.text for r in reqs])
        if need_glyph:
            cond = gm.condition(gm.encode_glyphs(full), gm.encode_prompts(prompts).to(self.dtype))
            white_full, _ = self.glyph_planes([""] * len(reqs))
            uncond = gm.condition(gm.encode_glyphs(white_full), gm.encode_prompts([""] * len(reqs)).to(self.dtype)) \
                if scale != 1.0 else None
        if need_base:
            if bm is None:
                raise ConfigError("r < 1 needs a base model")
            e_t_base = bm.encode_prompts(prompts).to(self.dtype)
            e_u_base = bm.encode_prompts([""] * len(reqs)).to(self.dtype) if scale != 1.0 else None
        z = request_noise([r.sampler.seed for r in reqs], PHASE_GENERATE, self._noise_shape(), self.dtype)
        gen = torch.Generator().manual_seed(derive_seed(sampler.seed, 3)) if sampler.eta > 0 else None
        with torch.no_grad():
            for t, kind in plan:
                if kind == "glyph":
                    eps = self._guided(lambda c: gm(z, t, c, lat, masks), cond, uncond, scale)
                else:
                    eps = self._guided(lambda c: bm(z, t, c), e_t_base, e_u_base, scale)
                self.calls[kind] += 1
                noise = torch.randn(z.shape, generator=gen, dtype=z.dtype) if gen is not None else None
                z = ddim_step(self.schedule, z, eps, t, t - 1, sampler.eta, noise, sampler.clip_x0)
            images = self.codec.decode(z).clamp(0.0, 1.0)
        return images.permute(0, 2, 3, 1).double().numpy()

    def generate(self, req: GenerationRequest, mask=None) -> np.ndarray:
        if mask is not None:
            m = mask.pixels if isinstance(mask, LocationMask) else mask
            mask = torch.as_tensor(np.asarray(m), dtype=self.dtype).reshape(1, 1, *self.latent_size)
        return self.generate_batch([req], mask)[0]

    def generate_no_text(self, prompt: str, sampler: SamplerConfig | None = None) -> np.ndarray:
        req = GenerationRequest(prompt, "", None, sampler or SamplerConfig(mask_source="all_ones"))
        return self.generate(req)


def estimate_mask(req: GenerationRequest, pipeline: GlyphPipeline) -> LocationMask:
    return pipeline.estimate_mask(req)


def generate(req: GenerationRequest, pipeline: GlyphPipeline, mask=None) -> np.ndarray:
    return pipeline.generate(req, mask)
