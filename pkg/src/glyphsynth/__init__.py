"""Glyph- and mask-conditioned latent diffusion for rendering legible text, at desk scale."""
from .conditioning import ConditioningConfig, Fusion, GlyphEncoder, TextEncoder, fuse, tokenize
from .data_pipeline import (
    Detection,
    FilterConfig,
    OcrRecord,
    SynthConfig,
    TextSample,
    filter_record,
    make_caption,
    synthesize_corpus,
    synthesize_sample,
)
from .denoiser import BaseDenoiser, GlyphDenoiser, UNetConfig, cross_attention, predict_noise
from .diffusion import NoiseSchedule, add_noise, ddim_step, loss_gd_weighted, loss_sd, predict_x0
from .errors import *  # noqa: F401,F403
from .evaluation import OcrOracle, accuracy_report, build_spelling_benchmark, frechet_proxy, is_correct, ocr_read
from .glyph_assets import (
    TOY_ALPHABET,
    GlyphAtlas,
    GlyphImage,
    LocationMask,
    QuadRegion,
    random_quad,
    rasterize_mask,
    render_glyph,
    to_latent_resolution,
)
from .inference import GenerationRequest, GlyphPipeline, SamplerConfig, estimate_mask, generate
from .training import MaskPredictor, TrainConfig, fit, partition_params

__version__ = "0.1.0"
