"""OCR-oracle accuracy, length-bucketed reports, a Fréchet-distance proxy and
the templated spelling benchmark."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyReport
from .glyph_assets import GlyphAtlas

log = logging.getLogger(__name__)

SPELLING_TEMPLATE = "The sign on the street says *"
DEFAULT_OCR_THRESHOLD = 0.7


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    return image


@dataclass
class Hit:
    char: str
    x: int  # left column of the glyph cell
    y: int  # top row of the glyph cell
    score: float


class OcrOracle:
    """Normalized cross-correlation against every atlas glyph.

    Templates carry a one-pixel blank border so that a window only matches when
    the glyph stands free of neighbouring strokes.
    """

    def __init__(self, atlas: GlyphAtlas, threshold: float = DEFAULT_OCR_THRESHOLD, border: int = 1):
        self.atlas = atlas
        self.threshold = threshold
        self.border = border * atlas.scale
        self.chars = list(atlas.alphabet)
        temps = []
        for ch in self.chars:
            t = np.pad(atlas.ink(ch), self.border)
            t = t - t.mean()
            temps.append(t / np.linalg.norm(t))
        self.templates = np.stack(temps)  # (K, th, tw)

    @property
    def advance(self) -> int:
        return self.atlas.cell[1] + self.atlas.spacing * self.atlas.scale

    def scores(self, image: np.ndarray) -> np.ndarray:
        """NCC map of shape (K, H - th + 1, W - tw + 1); input is ink-positive."""
        dark = 1.0 - to_gray(image)
        th, tw = self.templates.shape[1:]
        if dark.shape[0] < th or dark.shape[1] < tw:
            return np.zeros((len(self.chars), 0, 0))
        win = sliding_window_view(dark, (th, tw))
        centered = win - win.mean(axis=(-1, -2), keepdims=True)
        norms = np.sqrt((centered**2).sum(axis=(-1, -2)))
        raw = np.einsum("yxij,kij->kyx", centered, self.templates)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(norms > 1e-6, raw / norms, 0.0)

    def detect(self, image: np.ndarray) -> list[Hit]:
        s = self.scores(image)
        if s.size == 0:
            return []
        best = s.max(axis=0)
        arg = s.argmax(axis=0)
        ys, xs = np.nonzero(best >= self.threshold)
        order = np.argsort(-best[ys, xs], kind="stable")
        ch_h, ch_w = self.atlas.cell
        taken: list[Hit] = []
        for k in order:
            y, x = int(ys[k]), int(xs[k])
            cy, cx = y + self.border, x + self.border
            if any(abs(cy - h.y) < ch_h and abs(cx - h.x) < ch_w for h in taken):
                continue
            taken.append(Hit(self.chars[arg[y, x]], cx, cy, float(best[y, x])))
        return taken

    def read(self, image: np.ndarray) -> list[str]:
        """Recognized strings, top-to-bottom then left-to-right."""
        hits = sorted(self.detect(image), key=lambda h: (h.x, h.y))
        groups: list[list[Hit]] = []
        tol = self.atlas.scale
        for h in hits:
            for g in groups:
                last = g[-1]
                if abs(h.y - last.y) <= tol and 0 < h.x - last.x <= self.advance + tol:
                    g.append(h)
                    break
            else:
                groups.append([h])
        groups.sort(key=lambda g: (g[0].y, g[0].x))
        return ["".join(h.char for h in g) for g in groups]


def ocr_read(image: np.ndarray, oracle: OcrOracle) -> list[str]:
    return oracle.read(image)


def calibrate_oracle(oracle: OcrOracle, samples, blanks=()) -> dict:
    """Score statistics on clean renders: the weakest true glyph match and the
    strongest response on text-free images."""
    true_scores, blank_scores = [], []
    for s in samples:
        if not s.text:
            continue
        x0, y0 = int(s.quad.corners[0][0]), int(s.quad.corners[0][1])
        pad = oracle.border
        smap = oracle.scores(s.image)
        for i, ch in enumerate(s.text):
            k = oracle.chars.index(ch)
            x = x0 + 1 - pad + i * oracle.advance
            true_scores.append(float(smap[k, y0 + 1 - pad, x]))
    for img in blanks:
        smap = oracle.scores(img)
        if smap.size:
            blank_scores.append(float(smap.max()))
    return {
        "threshold": oracle.threshold,
        "min_true_score": min(true_scores) if true_scores else None,
        "max_blank_score": max(blank_scores) if blank_scores else None,
        "n_glyphs": len(true_scores),
        "n_blanks": len(blank_scores),
    }


def is_correct(requested: str, recognized, language: str = "en") -> bool:
    """True iff ``requested`` is a substring of some recognized string
    (case-insensitive for English). The empty string is always contained."""
    if requested == "":
        return True
    if language == "en":
        requested = requested.lower()
        recognized = [r.lower() for r in recognized]
    return any(requested in r for r in recognized)


def accuracy_report(results) -> dict:
    """``results``: dicts with ``length``, ``correct`` and optionally ``seed``.

    Per-seed overall accuracies give ``mean`` and population ``std``.
    """
    results = list(results)
    if not results:
        raise EmptyReport("no results to report")
    buckets = defaultdict(list)
    seeds = defaultdict(list)
    for r in results:
        buckets[int(r["length"])].append(bool(r["correct"]))
        seeds[r.get("seed", 0)].append(bool(r["correct"]))
    per_seed = [float(np.mean(v)) for _, v in sorted(seeds.items(), key=lambda kv: str(kv[0]))]
    return {
        "overall": float(np.mean([bool(r["correct"]) for r in results])),
        "buckets": {k: float(np.mean(v)) for k, v in sorted(buckets.items())},
        "bucket_counts": {k: len(v) for k, v in sorted(buckets.items())},
        "mean": float(np.mean(per_seed)),
        "std": float(np.std(per_seed)),
        "n": len(results),
        "n_seeds": len(per_seed),
    }


class FeatureEmbedder:
    """Fixed random two-layer projection of 8x8 average-pooled images."""

    def __init__(self, seed: int = 0, pooled: int = 8, channels: int = 3, hidden: int = 128, dim: int = 64):
        rng = np.random.default_rng(seed)
        d_in = pooled * pooled * channels
        self.pooled = pooled
        self.w1 = rng.normal(0, 1 / np.sqrt(d_in), size=(d_in, hidden))
        self.b1 = rng.normal(0, 0.1, size=hidden)
        self.w2 = rng.normal(0, 1 / np.sqrt(hidden), size=(hidden, dim))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        n, h, w, c = images.shape
        p = self.pooled
        pooled = images.reshape(n, p, h // p, p, w // p, c).mean(axis=(2, 4))
        x = (pooled.reshape(n, -1) - 0.5) * 4.0
        return np.tanh(x @ self.w1 + self.b1) @ self.w2


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_proxy(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[0] == 1 and a.shape[1] > 1 and np.asarray(feats_a).ndim == 1:
        a, b = a.T, b.T
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    reg = eps * np.eye(a.shape[1])
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + reg
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + reg
    sa = _sqrt_psd(cov_a)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(sa @ cov_b @ sa), 0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * cross)
    return max(d, 0.0)


@dataclass
class BenchmarkPrompt:
    prompt: str
    target_text: str
    length_bucket: int

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "text": self.target_text, "bucket": self.length_bucket}


def spelling_prompt(word: str, template: str = SPELLING_TEMPLATE) -> str:
    return template.replace("*", f'"{word}"')


def build_spelling_benchmark(words, template: str = SPELLING_TEMPLATE) -> list[BenchmarkPrompt]:
    out = []
    for w in words:
        if not w:
            log.warning("skipping empty benchmark word")
            continue
        out.append(BenchmarkPrompt(spelling_prompt(w, template), w, len(w)))
    return out


def toy_word_list(alphabet: str, per_length: int = 50, lengths=(1, 2, 3, 4), seed: int = 0) -> list[str]:
    """Deterministic pseudo-words over ``alphabet``, ``per_length`` of each length."""
    rng = np.random.default_rng(seed)
    words = []
    for n in lengths:
        for _ in range(per_length):
            words.append("".join(alphabet[i] for i in rng.integers(len(alphabet), size=n)))
    return words


def write_benchmark(prompts, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")


def read_benchmark(path: str | Path) -> list[BenchmarkPrompt]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(BenchmarkPrompt(row["prompt"], row["text"], int(row["bucket"])))
    return out


def creative_prompts() -> list[dict]:
    """Qualitative prompt set shipped with the package (id, zh, en)."""
    text = resources.files("glyphsynth.data").joinpath("creative_prompts.jsonl").read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def score_images(images, texts, oracle: OcrOracle, language: str = "en", seed=0) -> list[dict]:
    rows = []
    for img, text in zip(images, texts):
        recognized = oracle.read(img)
        rows.append({"text": text, "length": len(text), "recognized": recognized,
                     "correct": is_correct(text, recognized, language), "seed": seed})
    return rows
