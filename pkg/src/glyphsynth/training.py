"""Parameter partition, fine-tuning loop with the text-weighted loss, base-model
pretraining on text-free images, and mask-predictor training."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import PixelCodec
from .diffusion import NoiseSchedule, add_noise, loss_sd, weighted_loss_terms
from .errors import DivergenceError, PartitionError, PrerequisiteError
from .glyph_assets import to_latent_resolution

log = logging.getLogger(__name__)

TRAINABLE_RULES = (
    ("conv_in", re.compile(r"(^|\.)conv_in\.")),
    ("fusion", re.compile(r"^fusion\.")),
    ("attn_k", re.compile(r"\.cross\.to_k\.")),
    ("attn_v", re.compile(r"\.cross\.to_v\.")),
)
FROZEN_RULES = (
    ("encoders", re.compile(r"^(text_encoder|glyph_encoder)\.")),
    ("backbone", re.compile(r"^unet\.")),
)


@dataclass
class ParamPartition:
    trainable: set
    frozen: set
    groups: dict = field(default_factory=dict)  # name -> rule label

    def label(self, name: str) -> str:
        return "trainable" if name in self.trainable else "frozen"

    def manifest(self, model: nn.Module | None = None) -> dict:
        out = {
            "trainable": sorted(self.trainable),
            "frozen": sorted(self.frozen),
            "groups": dict(sorted(self.groups.items())),
        }
        if model is not None:
            out.update(parameter_counts(model, self))
        return out


def classify(name: str) -> tuple[bool, str]:
    hits = [label for label, rx in TRAINABLE_RULES if rx.search(name)]
    if len(hits) > 1:
        raise PartitionError(f"{name!r} matches several trainable groups: {hits}")
    if hits:
        return True, hits[0]
    for label, rx in FROZEN_RULES:
        if rx.search(name):
            return False, label
    raise PartitionError(f"{name!r} matches no partition rule")


def partition_params(model: nn.Module) -> ParamPartition:
    trainable, frozen, groups = set(), set(), {}
    for name, _ in model.named_parameters():
        is_train, label = classify(name)
        (trainable if is_train else frozen).add(name)
        groups[name] = label
    return ParamPartition(trainable, frozen, groups)


def apply_partition(model: nn.Module, part: ParamPartition) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(name in part.trainable)


def parameter_counts(model: nn.Module, part: ParamPartition) -> dict:
    n_train = sum(p.numel() for n, p in model.named_parameters() if n in part.trainable)
    n_total = sum(p.numel() for p in model.parameters())
    return {"n_trainable": n_train, "n_total": n_total, "trainable_fraction": n_train / n_total}


def cross_attention_kv_names(model: nn.Module) -> set:
    return {n for n, _ in model.named_parameters() if re.search(r"\.cross\.to_[kv]\.", n)}


# ---------------------------------------------------------------- data

@dataclass
class TrainingData:
    """Precomputed tensors for a list of TextSamples."""

    latents: torch.Tensor  # (N, c, h, w)
    glyphs: torch.Tensor  # (N, 1, H, W) image-resolution glyph
    glyph_lat: torch.Tensor  # (N, 1, h, w)
    mask_lat: torch.Tensor  # (N, 1, h, w)
    e_t: torch.Tensor  # (N, L_t, d_c)
    e_g: torch.Tensor | None  # (N, L_g, d_c)
    texts: list

    def __len__(self):
        return self.latents.shape[0]

    def batch(self, idx: torch.Tensor) -> "TrainingData":
        return TrainingData(
            self.latents[idx], self.glyphs[idx], self.glyph_lat[idx], self.mask_lat[idx], self.e_t[idx],
            None if self.e_g is None else self.e_g[idx], [self.texts[i] for i in idx.tolist()],
        )


def prepare_training_data(samples, model, codec=None, dtype=torch.float32, chunk: int = 256) -> TrainingData:
    codec = codec or PixelCodec()
    f = codec.factor
    images = torch.tensor(np.stack([s.image for s in samples]), dtype=dtype).permute(0, 3, 1, 2)
    glyphs = torch.tensor(np.stack([s.glyph.pixels for s in samples]), dtype=dtype)[:, None]
    glyph_lat = torch.tensor(np.stack([to_latent_resolution(s.glyph, f).pixels for s in samples]), dtype=dtype)[:, None]
    mask_lat = torch.tensor(np.stack([to_latent_resolution(s.mask, f).pixels for s in samples]), dtype=dtype)[:, None]
    captions = [s.caption for s in samples]
    e_t = torch.cat([model.encode_prompts(captions[i:i + chunk]) for i in range(0, len(captions), chunk)])
    e_g = None
    if hasattr(model, "encode_glyphs"):
        e_g = torch.cat([model.encode_glyphs(glyphs[i:i + chunk]) for i in range(0, len(samples), chunk)])
    return TrainingData(codec.encode(images), glyphs, glyph_lat, mask_lat, e_t.to(dtype),
                        None if e_g is None else e_g.to(dtype), [s.text for s in samples])


# ---------------------------------------------------------------- steps

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    epochs: int | None = None  # if set, overrides steps using the corpus size
    alpha: float = 0.5
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def total_steps(self, n: int) -> int:
        if self.epochs is None:
            return self.steps
        return self.epochs * max(1, n // self.batch_size)


def _noise(batch: TrainingData, schedule: NoiseSchedule, gen: torch.Generator):
    z0 = batch.latents
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    return t, eps, add_noise(schedule, z0, t, eps)


def glyph_loss(batch: TrainingData, model, schedule, alpha: float, gen: torch.Generator):
    t, eps, z_t = _noise(batch, schedule, gen)
    cond = model.condition(batch.e_g, batch.e_t)
    eps_hat = model(z_t, t, cond, batch.glyph_lat, batch.mask_lat)
    return weighted_loss_terms(eps, eps_hat, batch.mask_lat, alpha)


def base_loss(batch: TrainingData, model, schedule, alpha: float, gen: torch.Generator):
    t, eps, z_t = _noise(batch, schedule, gen)
    loss = loss_sd(eps, model(z_t, t, batch.e_t))
    return loss, torch.zeros(())


def train_step(batch: TrainingData, model, schedule: NoiseSchedule, cfg: TrainConfig,
               optimizer: torch.optim.Optimizer, gen: torch.Generator, loss_fn: Callable = glyph_loss) -> dict:
    """One optimizer update; only parameters with ``requires_grad`` move."""
    loss, text = loss_fn(batch, model, schedule, cfg.alpha, gen)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {"loss": loss.detach().item(), "loss_text_term": float(text.detach()) if torch.is_tensor(text) else float(text)}


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise PartitionError("model has no trainable parameters")
    return torch.optim.Adam(params, lr=lr)


@dataclass
class TrainState:
    step: int
    optimizer: torch.optim.Optimizer
    gen: torch.Generator


def save_training_state(state: TrainState, model: nn.Module, directory: str | Path, extra: dict | None = None) -> Path:
    from .checkpoint import save_checkpoint

    directory = Path(directory)
    save_checkpoint(model, directory, extra=extra)
    torch.save({"step": state.step, "optimizer": state.optimizer.state_dict(), "gen": state.gen.get_state()},
               directory / "train_state.pt")
    return directory


def fit(model: nn.Module, data: TrainingData, schedule: NoiseSchedule, cfg: TrainConfig,
        loss_fn: Callable = glyph_loss, log_path: str | Path | None = None,
        checkpoint_dir: str | Path | None = None, resume_from: str | Path | None = None,
        stop_after: int | None = None, progress: Callable | None = None) -> list[dict]:
    """Run the training loop; returns the per-step log rows.

    ``resume_from`` restores weights, optimizer moments and the sampling RNG so
    the continued run matches an uninterrupted one step for step.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg.learning_rate)
    start = 0
    if resume_from is not None:
        from .checkpoint import load_weights_into

        resume_from = Path(resume_from)
        load_weights_into(model, resume_from)
        st = torch.load(resume_from / "train_state.pt", weights_only=False)
        optimizer.load_state_dict(st["optimizer"])
        gen.set_state(st["gen"])
        start = st["step"]
    total = cfg.total_steps(len(data))
    end = total if stop_after is None else min(total, stop_after)
    rows = []
    logf = open(log_path, "a" if resume_from else "w") if log_path else None
    last_good = str(resume_from) if resume_from else None
    model.train()
    try:
        for step in range(start, end):
            idx = torch.randint(0, len(data), (cfg.batch_size,), generator=gen)
            try:
                row = train_step(data.batch(idx), model, schedule, cfg, optimizer, gen, loss_fn)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at step {step}", step=step, last_good=last_good) from exc
            row.update(step=step + 1, lr=cfg.learning_rate)
            rows.append(row)
            if logf:
                logf.write(json.dumps(row) + "\n")
            if progress and (step + 1) % cfg.log_every == 0:
                progress(row)
            if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                last_good = str(save_training_state(TrainState(step + 1, optimizer, gen), model,
                                                    Path(checkpoint_dir) / f"step{step + 1:06d}"))
    finally:
        if logf:
            logf.close()
    if checkpoint_dir:
        save_training_state(TrainState(end, optimizer, gen), model, Path(checkpoint_dir) / "last")
    model.eval()
    return rows


# ---------------------------------------------------------------- mask predictor

class MaskPredictor(nn.Module):
    """Per-pixel MLP over a feature map, sigmoid output (1 = background)."""

    def __init__(self, in_dim: int, hidden: int = 64, depth: int = 5, feature_tap: str = "features"):
        super().__init__()
        dims = [in_dim] + [hidden] * (depth - 1) + [1]
        layers = []
        for i in range(depth):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < depth - 1:
                layers.append(nn.SiLU())
        self.mlp = nn.Sequential(*layers)
        self.in_dim = in_dim
        self.hidden = hidden
        self.depth = depth
        self.feature_tap = feature_tap

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = features.permute(0, 2, 3, 1)
        return torch.sigmoid(self.mlp(x)).permute(0, 3, 1, 2)

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "depth": self.depth, "feature_tap": self.feature_tap}


@dataclass
class MaskTrainConfig:
    learning_rate: float = 2e-3
    steps: int = 600
    batch_size: int = 32
    draws: int = 1  # noise trajectories per sample
    hidden: int = 64
    depth: int = 5
    feature_tap: str = "features"
    seed: int = 0


def collect_mask_features(model, data: TrainingData, schedule: NoiseSchedule, t_early: int,
                          feature_tap: str = "features", seed: int = 0, chunk: int = 64, draws: int = 1):
    """Early-phase features (all-ones mask, true glyph) for every sample."""
    from .inference import early_phase

    feats, targets = [], []
    gen = torch.Generator().manual_seed(seed)
    for _ in range(draws):
        for i in range(0, len(data), chunk):
            b = data.batch(torch.arange(i, min(i + chunk, len(data))))
            noise = torch.randn(b.latents.shape, generator=gen, dtype=b.latents.dtype)
            with torch.no_grad():
                _, f, _ = early_phase(model, schedule, b.e_t, b.e_g, b.glyph_lat, noise, t_early, feature_tap)
            feats.append(f)
            targets.append(b.mask_lat)
    return torch.cat(feats), torch.cat(targets)


def train_mask_predictor(data: TrainingData, model, schedule: NoiseSchedule, t_early: int,
                         cfg: MaskTrainConfig | None = None, features=None) -> MaskPredictor:
    """Fit the per-pixel MLP to ground-truth masks from a frozen, trained denoiser."""
    cfg = cfg or MaskTrainConfig()
    if not getattr(model, "trained", False):
        raise PrerequisiteError("the glyph denoiser must be trained before its mask predictor")
    if features is None:
        features = collect_mask_features(model, data, schedule, t_early, cfg.feature_tap, cfg.seed, draws=cfg.draws)
    feats, targets = features
    torch.manual_seed(cfg.seed)
    mp = MaskPredictor(feats.shape[1], cfg.hidden, cfg.depth, cfg.feature_tap).to(feats.dtype)
    opt = torch.optim.Adam(mp.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    for _ in range(cfg.steps):
        idx = torch.randint(0, feats.shape[0], (cfg.batch_size,), generator=gen)
        loss = F.mse_loss(mp(feats[idx]), targets[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    mp.eval()
    return mp


def config_dict(obj) -> dict:
    return asdict(obj)
