"""Desk-scale toy experiment: synthesize a corpus, train the base and glyph
denoisers plus the mask predictor, then score sampling variants with the OCR
oracle. Trained artifacts are cached by a hash of the configuration."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import make_codec
from .conditioning import ConditioningConfig
from .data_pipeline import SynthConfig, synthesize_corpus
from .denoiser import BaseDenoiser, GlyphDenoiser, UNetConfig
from .diffusion import NoiseSchedule
from .evaluation import (
    FeatureEmbedder,
    OcrOracle,
    accuracy_report,
    build_spelling_benchmark,
    frechet_proxy,
    score_images,
    toy_word_list,
)
from .glyph_assets import TOY_ALPHABET, GlyphAtlas
from .inference import GenerationRequest, GlyphPipeline, SamplerConfig
from .training import (
    MaskTrainConfig,
    TrainConfig,
    apply_partition,
    base_loss,
    fit,
    glyph_loss,
    parameter_counts,
    partition_params,
    prepare_training_data,
    train_mask_predictor,
)

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    canvas: int = 32
    alphabet: str = TOY_ALPHABET
    n_train: int = 4000
    empty_fraction: float = 0.1
    max_offset: int = 0  # text sits exactly where the centered glyph image puts it
    noise_std: float = 0.0
    backgrounds: tuple = ("gradient", "radial")
    widths: tuple = (16, 32, 64)
    attn_dim: int = 32
    cond_dim: int = 64
    time_dim: int = 64
    T: int = 50
    schedule: str = "scaled_linear"
    base_steps: int = 3000
    glyph_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    glyph_learning_rate: float = 3e-3
    alpha: float = 0.5
    mask_samples: int = 1500
    mask_steps: int = 2000
    t_early: int = 35
    mask_feature_tap: str = "x0_context"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.backgrounds = tuple(self.backgrounds)

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def unet_config(self) -> UNetConfig:
        cond = ConditioningConfig(cond_dim=self.cond_dim, glyph_size=(self.canvas, self.canvas), seed=self.seed)
        return UNetConfig(widths=self.widths, attn_dim=self.attn_dim, time_dim=self.time_dim,
                          num_timesteps=self.T, cond=cond, seed=self.seed)

    def synth_config(self, empty_fraction: float | None = None) -> SynthConfig:
        ef = self.empty_fraction if empty_fraction is None else empty_fraction
        return SynthConfig(canvas=(self.canvas, self.canvas), alphabet=self.alphabet,
                           max_offset=self.max_offset, noise_std=self.noise_std,
                           backgrounds=self.backgrounds, empty_fraction=ef)


@dataclass
class ToyArtifacts:
    cfg: ToyConfig
    atlas: GlyphAtlas
    schedule: NoiseSchedule
    base: BaseDenoiser
    glyph: GlyphDenoiser
    mask_predictor: torch.nn.Module
    meta: dict = field(default_factory=dict)

    def pipeline(self) -> GlyphPipeline:
        return GlyphPipeline(self.glyph, self.base, self.schedule, self.atlas, (self.cfg.canvas,) * 2,
                             make_codec(1), self.mask_predictor)


def default_cache_dir() -> Path:
    return Path(os.environ.get("GLYPHSYNTH_CACHE", Path.home() / ".cache" / "glyphsynth"))


def _say(msg: str, verbose: bool) -> None:
    log.info(msg)
    if verbose:
        print(msg, flush=True)


def train_toy(cfg: ToyConfig, cache_dir: str | Path | None = None, verbose: bool = False) -> ToyArtifacts:
    """Train (or load from cache) base model, glyph model and mask predictor."""
    torch.set_num_threads(max(1, torch.get_num_threads()))
    root = Path(cache_dir or default_cache_dir()) / cfg.key()
    atlas = GlyphAtlas.builtin(cfg.alphabet)
    schedule = NoiseSchedule.build(cfg.schedule, T=cfg.T)
    done = root / "done.json"
    if done.exists():
        meta = json.loads(done.read_text())
        return ToyArtifacts(cfg, atlas, schedule, load_checkpoint(root / "base"), load_checkpoint(root / "glyph"),
                            load_checkpoint(root / "mask_predictor"), meta)
    root.mkdir(parents=True, exist_ok=True)
    (root / "toy_config.json").write_text(json.dumps(asdict(cfg), indent=1))
    meta = {"timings": {}}
    t0 = time.time()
    corpus = synthesize_corpus(cfg.n_train, cfg.seed, atlas, cfg.synth_config())
    meta["timings"]["corpus"] = time.time() - t0

    t0 = time.time()
    base = BaseDenoiser(cfg.unet_config())
    bdata = prepare_training_data(corpus, base)
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, steps=cfg.base_steps,
                       alpha=cfg.alpha, seed=cfg.seed)
    rows = fit(base, bdata, schedule, tcfg, loss_fn=base_loss, log_path=root / "base_log.jsonl",
               progress=lambda r: _say(f"base step {r['step']} loss {r['loss']:.4f}", verbose))
    base.trained = True
    save_checkpoint(base, root / "base")
    meta["timings"]["base"] = time.time() - t0
    meta["base_final_loss"] = float(np.mean([r["loss"] for r in rows[-50:]]))

    t0 = time.time()
    glyph = GlyphDenoiser.from_base(base)
    part = partition_params(glyph)
    apply_partition(glyph, part)
    meta["parameter_counts"] = parameter_counts(glyph, part)
    gdata = prepare_training_data(corpus, glyph)
    tcfg = TrainConfig(learning_rate=cfg.glyph_learning_rate, batch_size=cfg.batch_size, steps=cfg.glyph_steps,
                       alpha=cfg.alpha, seed=cfg.seed + 1)
    rows = fit(glyph, gdata, schedule, tcfg, loss_fn=glyph_loss, log_path=root / "glyph_log.jsonl",
               progress=lambda r: _say(f"glyph step {r['step']} loss {r['loss']:.4f}", verbose))
    glyph.trained = True
    save_checkpoint(glyph, root / "glyph")
    meta["timings"]["glyph"] = time.time() - t0
    meta["glyph_final_loss"] = float(np.mean([r["loss"] for r in rows[-50:]]))

    t0 = time.time()
    texted = [i for i, s in enumerate(corpus) if s.text][: cfg.mask_samples]
    mdata = gdata.batch(torch.tensor(texted))
    mcfg = MaskTrainConfig(steps=cfg.mask_steps, feature_tap=cfg.mask_feature_tap, seed=cfg.seed + 2)
    mp = train_mask_predictor(mdata, glyph, schedule, cfg.t_early, mcfg)
    save_checkpoint(mp, root / "mask_predictor")
    meta["timings"]["mask_predictor"] = time.time() - t0
    done.write_text(json.dumps(meta, indent=1))
    _say(f"trained toy artifacts in {root}: {meta['timings']}", verbose)
    return ToyArtifacts(cfg, atlas, schedule, base, glyph, mp, meta)


# ---------------------------------------------------------------- evaluation

VARIANTS = ("full", "random_mask", "no_glyph")


def variant_requests(prompts, variant: str, r: float, t_early: int, seed: int = 0):
    reqs = []
    for i, p in enumerate(prompts):
        src = {"full": "predicted", "random_mask": "random", "no_glyph": "all_ones"}[variant]
        text = "" if variant == "no_glyph" else p.target_text
        sampler = SamplerConfig(r=r, t_early=t_early, mask_source=src, seed=seed * 100_003 + i)
        reqs.append(GenerationRequest(p.prompt, text, None, sampler))
    return reqs


def generate_all(pipe: GlyphPipeline, reqs, batch: int = 50) -> np.ndarray:
    out = [pipe.generate_batch(reqs[i:i + batch]) for i in range(0, len(reqs), batch)]
    return np.concatenate(out) if out else np.zeros((0, *pipe.image_size, 3))


def benchmark_prompts(cfg: ToyConfig, per_length: int = 50, seed: int = 1234):
    return build_spelling_benchmark(toy_word_list(cfg.alphabet, per_length, seed=seed))


def reference_backgrounds(cfg: ToyConfig, n: int = 200, seed: int = 777) -> np.ndarray:
    atlas = GlyphAtlas.builtin(cfg.alphabet)
    return np.stack([s.image for s in synthesize_corpus(n, seed, atlas, cfg.synth_config(1.0))])


def evaluate_variant(art: ToyArtifacts, prompts, variant: str = "full", r: float = 0.5,
                     seed: int = 0, oracle: OcrOracle | None = None, batch: int = 50):
    oracle = oracle or OcrOracle(art.atlas)
    pipe = art.pipeline()
    images = generate_all(pipe, variant_requests(prompts, variant, r, art.cfg.t_early, seed), batch)
    rows = score_images(images, [p.target_text for p in prompts], oracle, "en", seed)
    for row, p in zip(rows, prompts):
        row["bucket"] = p.length_bucket
        row["variant"] = variant
        row["r"] = r
    return rows, images


def r_sweep(art: ToyArtifacts, prompts, rs=(0.0, 0.5, 1.0), seed: int = 0, embedder=None, reference=None,
            cache: dict | None = None):
    """OCR accuracy and Fréchet proxy (against text-free backgrounds) per r."""
    embedder = embedder or FeatureEmbedder(seed=0)
    reference = reference_backgrounds(art.cfg) if reference is None else reference
    ref_feats = embedder(reference)
    out = []
    for r in rs:
        if cache is not None and r in cache:
            rows, images = cache[r]
        else:
            rows, images = evaluate_variant(art, prompts, "full", r, seed)
        out.append({"r": r, "accuracy": accuracy_report(rows)["overall"],
                    "frechet": frechet_proxy(embedder(images), ref_feats), "n": len(rows)})
    return out


def mask_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """IoU of the text regions (value 0) of two masks; two empty regions give 1."""
    a, b = np.asarray(pred) < 0.5, np.asarray(target) < 0.5
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def heldout_mask_iou(art: ToyArtifacts, n: int = 100, seed: int = 4242) -> list[float]:
    samples = [s for s in synthesize_corpus(n, seed, art.atlas, art.cfg.synth_config(0.0)) if s.text]
    pipe = art.pipeline()
    reqs = [GenerationRequest(s.caption, s.text, None, SamplerConfig(t_early=art.cfg.t_early, seed=i))
            for i, s in enumerate(samples)]
    ious = []
    for i in range(0, len(reqs), 50):
        masks = pipe.estimate_masks(reqs[i:i + 50])
        for m, s in zip(masks[:, 0].double().numpy(), samples[i:i + 50]):
            ious.append(mask_iou(m, s.mask.pixels))
    return ious
