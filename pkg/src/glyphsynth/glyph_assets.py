"""Glyph rendering, quadrilateral mask rasterization and latent resizing.

Pixel conventions: arrays are indexed ``[row, col]``; a pixel at ``(col, row)``
covers ``[col, col + 1) x [row, row + 1)`` and its center is
``(col + 0.5, row + 0.5)``. Quad corners are ``(x, y)`` in the same frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConstraintError, DegenerateRegion, ShapeError, UnsupportedGlyph
from .font5x7 import FONT_5X7, GLYPH_COLS, GLYPH_ROWS

# letters chosen so every pair has normalized cross-correlation < 0.55
TOY_ALPHABET = "IJLMORVXYZ"


@dataclass(frozen=True)
class GlyphAtlas:
    """Bitmap alphabet: each glyph is a ``rows x cols`` ink array (1 = ink)."""

    glyphs: dict
    scale: int = 1
    spacing: int = 1
    name: str = "5x7"

    @classmethod
    def builtin(cls, alphabet: str | None = TOY_ALPHABET, scale: int = 1) -> "GlyphAtlas":
        chars = FONT_5X7.keys() if alphabet is None else alphabet
        glyphs = {}
        for ch in chars:
            if ch not in FONT_5X7:
                raise UnsupportedGlyph(ch)
            glyphs[ch] = np.array([[c == "#" for c in row] for row in FONT_5X7[ch]], dtype=np.float64)
        name = "5x7" if alphabet is None else f"5x7:{alphabet}"
        return cls(glyphs=glyphs, scale=scale, name=name)

    @property
    def alphabet(self) -> str:
        return "".join(ch for ch in self.glyphs if ch != " ")

    @property
    def cell(self) -> tuple[int, int]:
        return GLYPH_ROWS * self.scale, GLYPH_COLS * self.scale

    def ink(self, ch: str) -> np.ndarray:
        if ch == " ":
            return np.zeros((GLYPH_ROWS, GLYPH_COLS))
        if ch not in self.glyphs:
            raise UnsupportedGlyph(ch)
        g = self.glyphs[ch]
        if self.scale > 1:
            g = np.kron(g, np.ones((self.scale, self.scale)))
        return g

    def text_extent(self, text: str) -> tuple[int, int]:
        """(height, width) in pixels of a single-line render."""
        if not text:
            return 0, 0
        h, w = self.cell
        return h, len(text) * w + (len(text) - 1) * self.spacing * self.scale

    def text_ink(self, text: str) -> np.ndarray:
        """Ink array (1 = ink) of the tight text block."""
        h, w = self.text_extent(text)
        out = np.zeros((h, w))
        step = self.cell[1] + self.spacing * self.scale
        for i, ch in enumerate(text):
            out[:, i * step:i * step + self.cell[1]] = self.ink(ch)
        return out

    def save(self, directory: str | Path) -> None:
        """Write one PNG per glyph plus ``index.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"name": self.name, "scale": self.scale, "spacing": self.spacing, "glyphs": {}}
        for i, (ch, g) in enumerate(self.glyphs.items()):
            fname = f"{i:03d}.png"
            Image.fromarray(((1.0 - g) * 255).astype(np.uint8), mode="L").save(directory / fname)
            index["glyphs"][ch] = fname
        (directory / "index.json").write_text(json.dumps(index, ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "GlyphAtlas":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        glyphs = {}
        for ch, fname in index["glyphs"].items():
            px = np.asarray(Image.open(directory / fname).convert("L"), dtype=np.float64) / 255.0
            glyphs[ch] = (px < 0.5).astype(np.float64)
        return cls(glyphs=glyphs, scale=index["scale"], spacing=index["spacing"], name=index["name"])


@dataclass
class GlyphImage:
    pixels: np.ndarray  # grayscale in [0, 1], white background
    text: str

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class LocationMask:
    pixels: np.ndarray  # {0, 1}; 0 marks the text region

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class QuadRegion:
    """Four ``(x, y)`` corners, clockwise from top-left (y grows downward)."""

    corners: tuple

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.corners)
        if len(pts) != 4:
            raise DegenerateRegion(f"quad needs 4 corners, got {len(pts)}")
        object.__setattr__(self, "corners", pts)

    @classmethod
    def from_box(cls, x0: float, y0: float, x1: float, y1: float) -> "QuadRegion":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    @property
    def area(self) -> float:
        x = np.array([p[0] for p in self.corners])
        y = np.array([p[1] for p in self.corners])
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    @property
    def perimeter(self) -> float:
        c = np.array(self.corners)
        return float(np.linalg.norm(c - np.roll(c, -1, axis=0), axis=1).sum())

    @property
    def center(self) -> tuple[float, float]:
        c = np.array(self.corners)
        return float(c[:, 0].mean()), float(c[:, 1].mean())

    def is_simple(self) -> bool:
        # the two pairs of opposite edges must not cross
        c = self.corners
        return not (_segments_cross(c[0], c[1], c[2], c[3]) or _segments_cross(c[1], c[2], c[3], c[0]))

    def inside_bounds(self, size: tuple[int, int]) -> bool:
        h, w = size
        return all(0 <= x <= w and 0 <= y <= h for x, y in self.corners)

    def validate(self, size: tuple[int, int] | None = None) -> None:
        if self.area <= 0:
            raise DegenerateRegion("quad has zero area")
        if not self.is_simple():
            raise DegenerateRegion("quad is self-intersecting")
        if size is not None and not self.inside_bounds(size):
            raise DegenerateRegion(f"quad {self.corners} exceeds image bounds {size}")

    def to_list(self) -> list:
        return [list(p) for p in self.corners]


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1, d2 = _orient(p3, p4, p1), _orient(p3, p4, p2)
    d3, d4 = _orient(p1, p2, p3), _orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def render_glyph(text: str, canvas: tuple[int, int], atlas: GlyphAtlas) -> GlyphImage:
    """Render ``text`` dark-on-white, centered on a ``canvas`` (h, w) image."""
    h, w = canvas
    if h <= 0 or w <= 0:
        raise ShapeError(f"canvas must be positive, got {canvas}")
    pixels = np.ones((h, w))
    if not text:
        return GlyphImage(pixels, text)
    ink = atlas.text_ink(text)
    th, tw = ink.shape
    if th > h or tw > w:
        raise ShapeError(f"text {text!r} ({th}x{tw}) does not fit canvas {canvas}")
    top, left = (h - th) // 2, (w - tw) // 2
    pixels[top:top + th, left:left + tw] = 1.0 - ink
    return GlyphImage(pixels, text)


def pixel_centers(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def points_in_quad(quad: QuadRegion, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Closed point-in-polygon test (boundary counts as inside), vectorized."""
    corners = quad.corners
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    for i in range(4):
        (x1, y1), (x2, y2) = corners[i], corners[(i + 1) % 4]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        within = (
            (px >= min(x1, x2)) & (px <= max(x1, x2)) & (py >= min(y1, y2)) & (py <= max(y1, y2))
        )
        on_edge |= (cross == 0) & within
        # even-odd crossing test on a ray toward +x
        straddle = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_hit = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (px < x_hit)
    return inside | on_edge


def rasterize_mask(quad: QuadRegion, size: tuple[int, int]) -> LocationMask:
    quad.validate(size)
    px, py = pixel_centers(size)
    return LocationMask(np.where(points_in_quad(quad, px, py), 0.0, 1.0))


def empty_mask(size: tuple[int, int]) -> LocationMask:
    return LocationMask(np.ones(size))


def to_latent_resolution(img, factor: int):
    """Downsample a GlyphImage (area mean) or LocationMask (nearest, re-binarized)."""
    pixels = img.pixels
    h, w = pixels.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"factor {factor} does not divide {(h, w)}")
    if factor == 1:
        return type(img)(pixels.copy(), img.text) if isinstance(img, GlyphImage) else LocationMask(pixels.copy())
    if isinstance(img, GlyphImage):
        pooled = pixels.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
        return GlyphImage(np.clip(pooled, 0.0, 1.0), img.text)
    if isinstance(img, LocationMask):
        off = factor // 2
        sampled = pixels[off::factor, off::factor]
        return LocationMask((sampled >= 0.5).astype(np.float64))
    raise TypeError(f"unsupported type {type(img).__name__}")


def random_quad(
    seed: int,
    size: tuple[int, int],
    min_area_frac: float = 0.05,
    margin_frac: float = 0.1,
    max_area_frac: float = 1.0,
    perturb_frac: float = 0.15,
    max_tries: int = 100,
) -> QuadRegion:
    """Random convex quadrilateral with all corners at least ``margin_frac``
    of the image size away from the edges and area in
    ``[min_area_frac, max_area_frac]`` of the image."""
    h, w = size
    mx, my = margin_frac * w, margin_frac * h
    inner_w, inner_h = w - 2 * mx, h - 2 * my
    total = float(h * w)
    if inner_w <= 0 or inner_h <= 0 or inner_w * inner_h < min_area_frac * total or min_area_frac > max_area_frac:
        raise ConstraintError(
            f"no quad with area >= {min_area_frac:.3f} fits inside margins {margin_frac:.3f} of {size}"
        )
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        bw = rng.uniform(0.0, inner_w)
        bh = rng.uniform(0.0, inner_h)
        if not (min_area_frac * total <= bw * bh <= max_area_frac * total):
            continue
        x0 = mx + rng.uniform(0.0, inner_w - bw)
        y0 = my + rng.uniform(0.0, inner_h - bh)
        box = np.array([[x0, y0], [x0 + bw, y0], [x0 + bw, y0 + bh], [x0, y0 + bh]])
        jitter = rng.uniform(-1, 1, size=(4, 2)) * perturb_frac * np.array([bw, bh])
        pts = box + jitter
        pts[:, 0] = np.clip(pts[:, 0], mx, w - mx)
        pts[:, 1] = np.clip(pts[:, 1], my, h - my)
        quad = QuadRegion(tuple(map(tuple, pts)))
        if quad.is_simple() and min_area_frac * total <= quad.area <= max_area_frac * total:
            return quad
    # the inscribed rectangle always satisfies the constraints
    s = min(1.0, np.sqrt(min_area_frac * total / (inner_w * inner_h)) * 1.0001)
    bw, bh = inner_w * s, inner_h * s
    x0, y0 = mx + (inner_w - bw) / 2, my + (inner_h - bh) / 2
    return QuadRegion.from_box(x0, y0, x0 + bw, y0 + bh)


def save_gray_png(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def load_gray_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def quad_from_list(points: Sequence) -> QuadRegion:
    return QuadRegion(tuple(tuple(p) for p in points))
