"""Command-line entry points.

Every command takes an optional JSON config (one section per module); flags
override individual fields and the merged config is written next to outputs.
Exit codes: 0 success, 2 config error, 3 divergence, 4 empty input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, model_checksum, save_checkpoint
from .codec import make_codec
from .data_pipeline import FilterConfig, SynthConfig, filter_record, read_shard, synthesize_corpus, write_shard
from .denoiser import BaseDenoiser, GlyphDenoiser, UNetConfig
from .diffusion import NoiseSchedule
from .errors import ConfigError, DivergenceError, EmptyReport, GlyphSynthError, PrerequisiteError
from .evaluation import (
    FeatureEmbedder,
    OcrOracle,
    accuracy_report,
    build_spelling_benchmark,
    frechet_proxy,
    read_benchmark,
    score_images,
    toy_word_list,
)
from .glyph_assets import GlyphAtlas, quad_from_list
from .inference import GenerationRequest, GlyphPipeline, SamplerConfig
from .training import (
    MaskTrainConfig,
    TrainConfig,
    apply_partition,
    base_loss,
    fit,
    glyph_loss,
    partition_params,
    prepare_training_data,
    train_mask_predictor,
)

log = logging.getLogger("glyphsynth")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_EMPTY = 0, 2, 3, 4


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    seed: int
    paths: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"n": 1000, "language": "zh"})
    model: dict = field(default_factory=lambda: {"widths": [32, 64], "attn_dim": 32, "time_dim": 64,
                                                 "cond": {"cond_dim": 64}})
    schedule: dict = field(default_factory=lambda: {"T": 50, "beta_start": 1e-4, "beta_end": 0.02})
    train: dict = field(default_factory=dict)
    mask: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)

    def validate(self, required=()) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        for key in required:
            p = self.paths.get(key)
            if p is None:
                raise ConfigError(f"missing path '{key}'")
            if not Path(p).exists():
                raise ConfigError(f"path '{key}' does not exist: {p}")
        return self

    def synth_config(self) -> SynthConfig:
        known = {f.name for f in fields(SynthConfig)}
        kw = {k: v for k, v in self.data.items() if k in known}
        if "canvas" in kw:
            kw["canvas"] = tuple(kw["canvas"])
        return SynthConfig(**kw)

    def unet_config(self) -> UNetConfig:
        kw = dict(self.model)
        kw.setdefault("num_timesteps", self.schedule.get("T", 50))
        kw.setdefault("seed", self.seed)
        cond = dict(kw.pop("cond", {}))
        canvas = self.data.get("canvas", (32, 32))
        cond.setdefault("glyph_size", tuple(canvas))
        cond["glyph_size"] = tuple(cond["glyph_size"])
        kw["cond"] = cond
        try:
            return UNetConfig(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def noise_schedule(self) -> NoiseSchedule:
        try:
            return NoiseSchedule.build(**self.schedule)
        except TypeError as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, {"seed": self.seed, **self.train})

    def mask_config(self) -> MaskTrainConfig:
        return _build(MaskTrainConfig, {"seed": self.seed, **self.mask})

    def sampler_config(self, **over) -> SamplerConfig:
        return _build(SamplerConfig, {"seed": self.seed, "T": self.schedule.get("T", 50), **self.sampler, **over})

    def filter_config(self) -> FilterConfig:
        kw = dict(self.filter)
        return FilterConfig.for_language(self.data.get("language", "zh"), **kw)


def _build(cls, kw):
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    defaults = asdict(RunConfig(seed=0))
    merged = _merge(defaults, raw)
    merged = _merge(merged, overrides)
    unknown = set(merged) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return RunConfig(**merged)


def write_effective_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(asdict(cfg), indent=1, default=list))


# ---------------------------------------------------------------- commands

def cmd_build_dataset(cfg: RunConfig, out: Path) -> dict:
    cfg.validate()
    filt = cfg.filter_config()
    atlas = GlyphAtlas.builtin(cfg.data.get("alphabet") or GlyphAtlas.builtin().alphabet)
    synth = cfg.synth_config()
    samples = synthesize_corpus(int(cfg.data.get("n", 1000)), cfg.seed, atlas, synth,
                                cfg.data.get("language", "zh"))
    kept, reasons = [], {}
    for s in samples:
        if not s.text:
            kept.append(s)
            continue
        res = filter_record(s.ocr_record(), filt, s.image.shape[:2])
        if res.accepted:
            kept.append(s)
        else:
            reasons[res.reason] = reasons.get(res.reason, 0) + 1
    if not kept:
        raise EmptyReport(f"filter rejected every sample: {reasons}")
    stats = write_shard(kept, out)
    stats["rejected"] = reasons
    stats["n_synthesized"] = len(samples)
    (out / "stats.json").write_text(json.dumps(stats, indent=1))
    write_effective_config(cfg, out)
    return stats


def _fit(model, data, cfg: RunConfig, out: Path, loss_fn, resume):
    tcfg = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    try:
        fit(model, data, cfg.noise_schedule(), tcfg, loss_fn, log_path=out / "loss_log.jsonl",
            checkpoint_dir=out / "checkpoints", resume_from=resume,
            progress=lambda r: log.info("step %d loss %.5f", r["step"], r["loss"]))
    except DivergenceError as exc:
        log.error("training diverged at step %s; last good checkpoint: %s", exc.step, exc.last_good)
        raise


def cmd_train_base(cfg: RunConfig, out: Path, resume=None) -> Path:
    cfg.validate(["dataset"])
    samples = read_shard(cfg.paths["dataset"])
    if not samples:
        raise EmptyReport("empty dataset")
    model = BaseDenoiser(cfg.unet_config())
    data = prepare_training_data(samples, model)
    _fit(model, data, cfg, out, base_loss, resume)
    model.trained = True
    write_effective_config(cfg, out)
    return save_checkpoint(model, out / "model")


def cmd_train(cfg: RunConfig, out: Path, resume=None) -> Path:
    cfg.validate(["dataset", "base"])
    samples = read_shard(cfg.paths["dataset"])
    if not samples:
        raise EmptyReport("empty dataset")
    base = load_checkpoint(cfg.paths["base"])
    if not isinstance(base, BaseDenoiser):
        raise ConfigError("paths.base must point at a base denoiser checkpoint")
    model = GlyphDenoiser.from_base(base)
    apply_partition(model, partition_params(model))
    data = prepare_training_data(samples, model)
    _fit(model, data, cfg, out, glyph_loss, resume)
    model.trained = True
    write_effective_config(cfg, out)
    (out / "partition.json").write_text(json.dumps(partition_params(model).manifest(model), indent=1))
    return save_checkpoint(model, out / "model")


def cmd_train_mask_predictor(cfg: RunConfig, out: Path) -> Path:
    cfg.validate(["dataset", "glyph"])
    samples = [s for s in read_shard(cfg.paths["dataset"]) if s.text]
    if not samples:
        raise EmptyReport("no text samples in dataset")
    model = load_checkpoint(cfg.paths["glyph"])
    if not isinstance(model, GlyphDenoiser):
        raise ConfigError("paths.glyph must point at a glyph denoiser checkpoint")
    data = prepare_training_data(samples, model)
    mp = train_mask_predictor(data, model, cfg.noise_schedule(), cfg.sampler_config().t_early, cfg.mask_config())
    write_effective_config(cfg, out)
    return save_checkpoint(mp, out / "model")


def _pipeline(cfg: RunConfig, need_predictor: bool) -> GlyphPipeline:
    cfg.validate(["glyph", "base"] + (["mask_predictor"] if need_predictor else []))
    glyph = load_checkpoint(cfg.paths["glyph"])
    base = load_checkpoint(cfg.paths["base"])
    mp = load_checkpoint(cfg.paths["mask_predictor"]) if need_predictor else None
    size = tuple(glyph.cfg.cond.glyph_size)
    atlas = GlyphAtlas.builtin(cfg.data.get("alphabet") or GlyphAtlas.builtin().alphabet)
    return GlyphPipeline(glyph, base, cfg.noise_schedule(), atlas, size, make_codec(1), mp)


def save_rgb_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def cmd_sample(cfg: RunConfig, out: Path, prompt: str, text: str, quad=None, n: int = 1) -> list[Path]:
    sampler = cfg.sampler_config()
    if quad is not None:
        sampler = cfg.sampler_config(mask_source="user")
    pipe = _pipeline(cfg, bool(text) and sampler.mask_source == "predicted")
    out.mkdir(parents=True, exist_ok=True)
    reqs = [GenerationRequest(prompt, text, quad, cfg.sampler_config(**{**asdict(sampler), "seed": sampler.seed + i}))
            for i in range(n)]
    masks = pipe.resolve_masks(reqs)
    images = pipe.generate_batch(reqs, masks)
    paths = []
    for i, (img, req) in enumerate(zip(images, reqs)):
        p = out / f"sample_{i:03d}.png"
        save_rgb_png(img, p)
        side = {"prompt": prompt, "text": text, "quad": quad.to_list() if quad else None,
                "sampler": asdict(req.sampler), "mask_all_ones": bool((masks[i] == 1).all()),
                "step_counts": dict(pipe.calls), "schedule": cfg.schedule,
                "glyph_checksum": model_checksum(pipe.glyph_model), "base_checksum": model_checksum(pipe.base_model)}
        (out / f"sample_{i:03d}.json").write_text(json.dumps(side, indent=1))
        paths.append(p)
    write_effective_config(cfg, out)
    return paths


def _images_from_dir(d: Path):
    images, texts = [], []
    for side in sorted(d.glob("*.json")):
        png = side.with_suffix(".png")
        if not png.exists():
            continue
        meta = json.loads(side.read_text())
        images.append(np.asarray(Image.open(png).convert("RGB"), dtype=np.float64) / 255.0)
        texts.append(meta.get("text", ""))
    return images, texts


def _lengths(cfg: RunConfig) -> range:
    synth = cfg.synth_config()
    return range(max(1, synth.min_len), synth.max_len + 1)


def cmd_evaluate(cfg: RunConfig, out: Path, images_dir=None, benchmark=None, per_length: int = 50,
                 r_values=None) -> dict:
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    atlas = GlyphAtlas.builtin(cfg.data.get("alphabet") or GlyphAtlas.builtin().alphabet)
    oracle = OcrOracle(atlas)
    report = {}
    if images_dir is not None:
        images, texts = _images_from_dir(Path(images_dir))
        if not images:
            raise EmptyReport(f"no images with sidecars in {images_dir}")
        report["images"] = accuracy_report(score_images(images, texts, oracle))
    else:
        prompts = read_benchmark(benchmark) if benchmark else \
            build_spelling_benchmark(toy_word_list(atlas.alphabet, per_length, _lengths(cfg), seed=cfg.seed))
        if not prompts:
            raise EmptyReport("empty benchmark")
        pipe = _pipeline(cfg, True)
        embedder = FeatureEmbedder(seed=0)
        canvas = tuple(pipe.image_size)
        bg = synthesize_corpus(max(len(prompts), 2), cfg.seed + 777, atlas,
                               SynthConfig(canvas=canvas, empty_fraction=1.0))
        ref = embedder(np.stack([s.image for s in bg]))
        rows_out = []
        for r in (r_values or [cfg.sampler_config().r]):
            reqs = [GenerationRequest(p.prompt, p.target_text, None, cfg.sampler_config(r=r, seed=cfg.seed * 100_003 + i))
                    for i, p in enumerate(prompts)]
            images = np.concatenate([pipe.generate_batch(reqs[i:i + 50]) for i in range(0, len(reqs), 50)])
            rep = accuracy_report(score_images(images, [p.target_text for p in prompts], oracle, seed=cfg.seed))
            fd = frechet_proxy(embedder(images), ref)
            report[f"r={r}"] = {**rep, "frechet": fd}
            rows_out.append({"r": r, "accuracy": rep["overall"], "frechet": fd, "n": rep["n"],
                             **{f"acc_len{k}": v for k, v in rep["buckets"].items()}})
        with open(out / "r_sweep.csv", "w", newline="") as fh:
            keys = sorted({k for row in rows_out for k in row}, key=lambda k: (k != "r", k))
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows_out)
    (out / "report.json").write_text(json.dumps(report, indent=1))
    write_effective_config(cfg, out)
    return report


# ---------------------------------------------------------------- argparse

def _parse_overrides(pairs) -> dict:
    """``section.key=value`` pairs; values are parsed as JSON when possible."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override must look like section.key=value: {pair}")
        key, value = pair.split("=", 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glyphsynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, paths=()):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        for name in paths:
            sp.add_argument(f"--{name.replace('_', '-')}", dest=f"path_{name}")

    sp = sub.add_parser("build-dataset", help="synthesize and filter a toy shard")
    common(sp)
    sp.add_argument("--n", type=int)

    sp = sub.add_parser("train-base", help="train the text-only base denoiser")
    common(sp, ["dataset"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume")

    sp = sub.add_parser("train", help="fine-tune the glyph-conditioned denoiser from a base checkpoint")
    common(sp, ["dataset", "base"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume")

    sp = sub.add_parser("train-mask-predictor", help="fit the mask predictor on a trained glyph model")
    common(sp, ["dataset", "glyph"])

    sp = sub.add_parser("sample", help="generate images with sidecar JSON")
    common(sp, ["glyph", "base", "mask_predictor"])
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--text", default="")
    sp.add_argument("--r", type=float)
    sp.add_argument("--n", type=int, default=1)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--quad", help="JSON list of four [x, y] corners")
    g.add_argument("--random-mask", action="store_true")
    g.add_argument("--predicted-mask", action="store_true")

    sp = sub.add_parser("evaluate", help="OCR accuracy report and r-sweep CSV")
    common(sp, ["glyph", "base", "mask_predictor"])
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--images-dir")
    src.add_argument("--generate-from-benchmark", nargs="?", const="", metavar="JSONL")
    sp.add_argument("--per-length", type=int, default=50)
    sp.add_argument("--r-sweep", help="comma-separated r values, e.g. 0,0.5,1")
    return p


def _overrides_from_args(args) -> dict:
    over = _parse_overrides(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    paths = {k[5:]: v for k, v in vars(args).items() if k.startswith("path_") and v is not None}
    if paths:
        over.setdefault("paths", {}).update(paths)
    if getattr(args, "n", None) is not None and args.command == "build-dataset":
        over.setdefault("data", {})["n"] = args.n
    if getattr(args, "steps", None) is not None:
        over.setdefault("train", {})["steps"] = args.steps
    if getattr(args, "r", None) is not None:
        over.setdefault("sampler", {})["r"] = args.r
    if getattr(args, "random_mask", False):
        over.setdefault("sampler", {})["mask_source"] = "random"
    if getattr(args, "predicted_mask", False):
        over.setdefault("sampler", {})["mask_source"] = "predicted"
    return over


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_run_config(args.config, _overrides_from_args(args))
        if args.command == "build-dataset":
            stats = cmd_build_dataset(cfg, out)
            log.info("wrote %d samples to %s", stats["count"], out)
        elif args.command == "train-base":
            cmd_train_base(cfg, out, args.resume)
        elif args.command == "train":
            cmd_train(cfg, out, args.resume)
        elif args.command == "train-mask-predictor":
            cmd_train_mask_predictor(cfg, out)
        elif args.command == "sample":
            quad = quad_from_list(json.loads(args.quad)) if args.quad else None
            cmd_sample(cfg, out, args.prompt, args.text, quad, args.n)
        elif args.command == "evaluate":
            rs = [float(x) for x in args.r_sweep.split(",")] if args.r_sweep else None
            bench = args.generate_from_benchmark or None
            cmd_evaluate(cfg, out, args.images_dir, bench, args.per_length, rs)
    except (ConfigError, PrerequisiteError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc} (last good checkpoint: {exc.last_good})", file=sys.stderr)
        return EXIT_DIVERGENCE
    except EmptyReport as exc:
        print(f"empty input: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except GlyphSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
