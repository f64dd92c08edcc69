"""Record filtering, caption templating and synthetic textual-image samples."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import ConfigError, DegenerateRegion, MalformedRecord
from .glyph_assets import (
    GlyphAtlas,
    GlyphImage,
    LocationMask,
    QuadRegion,
    empty_mask,
    load_gray_png,
    quad_from_list,
    rasterize_mask,
    render_glyph,
    save_gray_png,
)

log = logging.getLogger(__name__)

# characters an OCR model tends to hallucinate on windows, grids and similar textures
ZH_CHAR_BLACKLIST = frozenset("米口回人王川大美三丰区中十田山一下个门八小品具工")
ZH_AD_KEYWORDS = (
    "厂价", "直销", "包邮", "包赔", "立减", "清仓", "买1", "买一", "已售", "客服", "拍下",
    "改价", "开票", "厂家", "质保", "超值", "礼包", "限时", "全赔", "系列", "新品",
)
WATERMARK_KEYWORDS = ("www.", ".com")

RULE_ORDER = ("confidence", "multi_text", "char_size", "edge_margin", "blacklist", "keyword")


@dataclass
class Detection:
    text: str
    quad: QuadRegion
    confidence: float


@dataclass
class OcrRecord:
    image_path: str
    caption: str
    detections: list
    image_size: tuple | None = None  # (H, W)
    language: str = "zh"

    @classmethod
    def from_dict(cls, row: dict) -> "OcrRecord":
        try:
            dets = [
                Detection(str(d["text"]), quad_from_list(d["quad"]), float(d["confidence"]))
                for d in row.get("detections", [])
            ]
            size = tuple(row["image_size"]) if row.get("image_size") else None
            return cls(row["image_path"], row.get("caption", ""), dets, size, row.get("language", "zh"))
        except (KeyError, TypeError, ValueError, DegenerateRegion) as exc:
            raise MalformedRecord(f"bad record {row!r}: {exc}") from exc

    def to_dict(self) -> dict:
        out = {
            "image_path": self.image_path,
            "caption": self.caption,
            "language": self.language,
            "detections": [{"text": d.text, "quad": d.quad.to_list(), "confidence": d.confidence} for d in self.detections],
        }
        if self.image_size is not None:
            out["image_size"] = list(self.image_size)
        return out


@dataclass
class FilterConfig:
    min_confidence: float = 0.8
    min_char_area_frac: float = 0.007
    min_edge_margin_frac: float = 0.1
    max_text_regions: int = 1
    min_text_length: int = 1
    char_blacklist: frozenset = ZH_CHAR_BLACKLIST
    keyword_blacklist: tuple = ZH_AD_KEYWORDS + WATERMARK_KEYWORDS

    def __post_init__(self):
        for name in ("min_char_area_frac", "min_edge_margin_frac"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if not 0 <= self.min_confidence <= 1:
            raise ConfigError("min_confidence must lie in [0, 1]")
        if self.max_text_regions < 1:
            raise ConfigError("max_text_regions must be >= 1")
        self.char_blacklist = frozenset(self.char_blacklist)
        self.keyword_blacklist = tuple(self.keyword_blacklist)

    @classmethod
    def for_language(cls, language: str, **overrides) -> "FilterConfig":
        if language == "en":
            base = dict(min_char_area_frac=0.002, min_text_length=2, char_blacklist=frozenset(),
                        keyword_blacklist=WATERMARK_KEYWORDS)
        elif language == "zh":
            base = {}
        else:
            raise ConfigError(f"unknown language {language!r}")
        base.update(overrides)
        return cls(**base)


@dataclass
class Accept:
    detection: Detection
    accepted: bool = field(default=True, init=False)


@dataclass
class Reject:
    reason: str
    accepted: bool = field(default=False, init=False)


def filter_record(rec: OcrRecord, cfg: FilterConfig, image_size: tuple[int, int] | None = None):
    """Apply the curation rules in ``RULE_ORDER``; the first failure names the reject."""
    size = image_size or rec.image_size
    if size is None:
        raise MalformedRecord("image size unknown")
    h, w = size
    for det in rec.detections:
        try:
            det.quad.validate(size)
        except Exception as exc:
            raise MalformedRecord(str(exc)) from exc
        if not 0 <= det.confidence <= 1:
            raise MalformedRecord(f"confidence {det.confidence} outside [0, 1]")
    survivors = [d for d in rec.detections if d.confidence >= cfg.min_confidence]
    if not survivors:
        return Reject("confidence")
    if len(survivors) > cfg.max_text_regions:
        return Reject("multi_text")
    det = survivors[0]
    n_chars = len(det.text.replace(" ", ""))
    if n_chars == 0 or det.quad.area / n_chars < cfg.min_char_area_frac * h * w:
        return Reject("char_size")
    cx, cy = det.quad.center
    mx, my = cfg.min_edge_margin_frac * w, cfg.min_edge_margin_frac * h
    if not (cx >= mx and w - cx >= mx and cy >= my and h - cy >= my):
        return Reject("edge_margin")
    if n_chars < cfg.min_text_length or all(ch in cfg.char_blacklist for ch in det.text.replace(" ", "")):
        return Reject("blacklist")
    haystacks = [rec.caption.lower()] + [d.text.lower() for d in rec.detections]
    if any(k.lower() in s for k in cfg.keyword_blacklist for s in haystacks):
        return Reject("keyword")
    return Accept(det)


def load_ocr_records(path: str | Path) -> list[OcrRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(OcrRecord.from_dict(json.loads(line)))
    return out


def make_caption(base_caption: str, text: str, language: str = "en") -> str:
    """Embed the quoted target text into a caption (no-op when already present)."""
    if not text:
        return base_caption
    if language == "zh":
        quoted = f"“{text}”"
        if quoted in base_caption or f'"{text}"' in base_caption:
            return base_caption
        return f"{base_caption}，上面写着{quoted}"
    quoted = f'"{text}"'
    if quoted in base_caption:
        return base_caption
    return f"{base_caption} with writing on it {quoted}"


# ---------------------------------------------------------------- synthesis

COLOR_NAMES = {
    "red": (0.95, 0.55, 0.5),
    "orange": (0.97, 0.75, 0.45),
    "yellow": (0.96, 0.92, 0.5),
    "green": (0.6, 0.88, 0.6),
    "teal": (0.5, 0.85, 0.82),
    "blue": (0.55, 0.7, 0.95),
    "purple": (0.78, 0.62, 0.92),
    "pink": (0.96, 0.68, 0.82),
    "gray": (0.78, 0.78, 0.78),
    "cream": (0.98, 0.95, 0.85),
}
BACKGROUND_KINDS = ("gradient", "radial", "blobs", "stripes")


@dataclass
class SynthConfig:
    canvas: tuple = (32, 32)
    alphabet: str | None = None  # None: use the atlas alphabet
    min_len: int = 1
    max_len: int = 4
    max_offset: int = 1  # pixel jitter of the text block around the canvas center
    pad: int = 1
    noise_std: float = 0.02
    empty_fraction: float = 0.0
    backgrounds: tuple | None = None  # subset of BACKGROUND_KINDS; None allows all

    @property
    def mean_length(self) -> float:
        return (self.min_len + self.max_len) / 2 * (1 - self.empty_fraction)


@dataclass
class TextSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    caption: str
    text: str
    quad: QuadRegion | None
    glyph: GlyphImage
    mask: LocationMask
    language: str = "zh"

    def ocr_record(self, image_path: str = "") -> OcrRecord:
        dets = [Detection(self.text, self.quad, 1.0)] if self.quad is not None else []
        return OcrRecord(image_path, self.caption, dets, self.image.shape[:2], self.language)


def procedural_background(rng: np.random.Generator, canvas: tuple[int, int], kind: int | None = None,
                          noise_std: float = 0.02) -> tuple[np.ndarray, str]:
    """Smooth light-toned background and a short description of it."""
    h, w = canvas
    kind = int(rng.integers(len(BACKGROUND_KINDS))) if kind is None else kind % len(BACKGROUND_KINDS)
    names = list(COLOR_NAMES)
    n1, n2 = rng.choice(len(names), size=2, replace=False)
    c1, c2 = np.array(COLOR_NAMES[names[n1]]), np.array(COLOR_NAMES[names[n2]])
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    name = BACKGROUND_KINDS[kind]
    if name == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        s = np.cos(ang) * xs + np.sin(ang) * ys
        s = (s - s.min()) / (np.ptp(s) + 1e-9)
        desc = f"a {names[n1]} and {names[n2]} gradient background"
    elif name == "radial":
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        s = np.clip(np.hypot(xs - cx, ys - cy) / 0.8, 0, 1)
        desc = f"a {names[n1]} glow fading into {names[n2]}"
    elif name == "blobs":
        s = np.zeros((h, w))
        for _ in range(3):
            cx, cy = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.15, 0.35)
            s += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))
        s = np.clip(s / s.max(), 0, 1)
        desc = f"soft {names[n1]} blobs on a {names[n2]} background"
    else:
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 4.0)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(ang) * xs + np.sin(ang) * ys))
        desc = f"{names[n1]} and {names[n2]} stripes"
    img = c2[None, None] * s[..., None] + c1[None, None] * (1 - s[..., None])
    img = img + rng.normal(0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0), desc


def stamp_text(image: np.ndarray, text: str, top_left: tuple[int, int], atlas: GlyphAtlas,
               color=(0.1, 0.1, 0.1)) -> np.ndarray:
    """Paint ``text`` at ``top_left`` = (x, y); returns a new image."""
    out = image.copy()
    if not text:
        return out
    ink = atlas.text_ink(text)
    x, y = top_left
    th, tw = ink.shape
    region = out[y:y + th, x:x + tw]
    if region.shape[:2] != ink.shape:
        raise ValueError(f"text block {ink.shape} at {top_left} leaves the canvas {image.shape[:2]}")
    a = ink[..., None]
    out[y:y + th, x:x + tw] = region * (1 - a) + np.asarray(color)[None, None] * a
    return out


def text_quad(text: str, top_left: tuple[int, int], atlas: GlyphAtlas, pad: int) -> QuadRegion:
    th, tw = atlas.text_extent(text)
    x, y = top_left
    return QuadRegion.from_box(x - pad, y - pad, x + tw + pad, y + th + pad)


def random_text(rng: np.random.Generator, alphabet: str, min_len: int, max_len: int) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(alphabet[i] for i in rng.integers(len(alphabet), size=n))


def synthesize_sample(seed: int, canvas: tuple[int, int], text: str, background: int | None,
                      atlas: GlyphAtlas, cfg: SynthConfig | None = None,
                      filter_cfg: FilterConfig | None = None, language: str = "zh") -> TextSample:
    """Procedural background with ``text`` stamped near the canvas center."""
    cfg = cfg or SynthConfig(canvas=tuple(canvas))
    filter_cfg = filter_cfg or FilterConfig.for_language(language)
    rng = np.random.default_rng(seed)
    h, w = canvas
    if background is None and cfg.backgrounds:
        unknown = set(cfg.backgrounds) - set(BACKGROUND_KINDS)
        if unknown:
            raise ConfigError(f"unknown background kinds {sorted(unknown)}")
        background = BACKGROUND_KINDS.index(cfg.backgrounds[int(rng.integers(len(cfg.backgrounds)))])
    bg, desc = procedural_background(rng, canvas, background, cfg.noise_std)
    glyph = render_glyph(text, canvas, atlas)
    if not text:
        return TextSample(bg, desc, "", None, glyph, empty_mask(canvas), language)
    th, tw = atlas.text_extent(text)
    x_lo, x_hi = cfg.pad, w - tw - cfg.pad
    y_lo, y_hi = cfg.pad, h - th - cfg.pad
    if x_hi < x_lo or y_hi < y_lo:
        raise ConfigError(f"text {text!r} does not fit {canvas}")
    cx0, cy0 = (w - tw) // 2, (h - th) // 2
    x = int(np.clip(cx0 + rng.integers(-cfg.max_offset, cfg.max_offset + 1), x_lo, x_hi))
    y = int(np.clip(cy0 + rng.integers(-cfg.max_offset, cfg.max_offset + 1), y_lo, y_hi))
    quad = text_quad(text, (x, y), atlas, cfg.pad)
    qx, qy = quad.center
    mx, my = filter_cfg.min_edge_margin_frac * w, filter_cfg.min_edge_margin_frac * h
    if not (mx <= qx <= w - mx and my <= qy <= h - my):
        raise ConfigError("text center violates the edge margin")
    color = rng.uniform(0.0, 0.25, size=3)
    image = stamp_text(bg, text, (x, y), atlas, color)
    caption = make_caption(desc, text, "en")
    return TextSample(image, caption, text, quad, glyph, rasterize_mask(quad, canvas), language)


def synthesize_corpus(n: int, seed: int, atlas: GlyphAtlas, cfg: SynthConfig, language: str = "zh") -> list[TextSample]:
    alphabet = cfg.alphabet or atlas.alphabet
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        empty = rng.uniform() < cfg.empty_fraction
        text = "" if empty else random_text(rng, alphabet, cfg.min_len, cfg.max_len)
        out.append(synthesize_sample(int(rng.integers(2**31)), cfg.canvas, text, None, atlas, cfg, language=language))
    return out


def corpus_stats(samples: Iterable) -> dict:
    texts = [s.text if hasattr(s, "text") else str(s) for s in samples]
    total = sum(len(t) for t in texts)
    return {
        "count": len(texts),
        "total_chars": total,
        "unique_chars": len(set("".join(texts))),
        "mean_chars_per_sample": total / len(texts) if texts else 0.0,
    }


# ---------------------------------------------------------------- shards

def write_shard(samples: list[TextSample], directory: str | Path) -> dict:
    directory = Path(directory)
    for sub in ("samples", "glyphs", "masks"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    with open(directory / "meta.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            name = f"{i:04d}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="RGB").save(directory / "samples" / name)
            save_gray_png(s.glyph.pixels, directory / "glyphs" / name)
            save_gray_png(s.mask.pixels, directory / "masks" / name)
            row = {"id": i, "caption": s.caption, "text": s.text,
                   "quad": s.quad.to_list() if s.quad else None, "language": s.language}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    stats = corpus_stats(samples)
    (directory / "stats.json").write_text(json.dumps(stats, indent=1))
    return stats


def read_shard(directory: str | Path) -> list[TextSample]:
    directory = Path(directory)
    out = []
    with open(directory / "meta.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            name = f"{row['id']:04d}.png"
            img = np.asarray(Image.open(directory / "samples" / name).convert("RGB"), dtype=np.float64) / 255.0
            glyph = GlyphImage(load_gray_png(directory / "glyphs" / name), row["text"])
            mask = LocationMask((load_gray_png(directory / "masks" / name) >= 0.5).astype(np.float64))
            quad = quad_from_list(row["quad"]) if row["quad"] else None
            out.append(TextSample(img, row["caption"], row["text"], quad, glyph, mask, row.get("language", "zh")))
    return out
