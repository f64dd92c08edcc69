"""Hand-built OCR records for the curation rules, on a 100x100 image.

Thresholds at that size: 0.7% -> 70 px per character (zh), 0.2% -> 20 px (en),
10% margin -> 10 px.
"""
from glyphsynth.data_pipeline import Detection, OcrRecord
from glyphsynth.glyph_assets import QuadRegion

SIZE = (100, 100)


def box(cx, cy, w, h):
    return QuadRegion.from_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def rec(dets, caption="a shop sign", language="zh"):
    return OcrRecord("img.png", caption, [Detection(t, q, c) for t, q, c in dets], SIZE, language)


# (name, record, expected reason or None for Accept)
GOLDEN = [
    ("confidence_at_boundary", rec([("天地", box(50, 50, 20, 10), 0.8)]), None),
    ("confidence_just_below", rec([("天地", box(50, 50, 20, 10), 0.79)]), "confidence"),
    ("confidence_epsilon_below", rec([("天地", box(50, 50, 20, 10), 0.8 - 1e-9)]), "confidence"),
    ("no_detections", rec([]), "confidence"),
    ("zh_size_at_boundary", rec([("天地", box(50, 50, 14, 10), 0.95)]), None),
    ("zh_size_below", rec([("天地", box(50, 50, 12, 10), 0.95)]), "char_size"),
    ("en_size_at_boundary", rec([("hi", box(50, 50, 8, 5), 0.95)], language="en"), None),
    ("en_size_below", rec([("hi", box(50, 50, 7.6, 5), 0.95)], language="en"), "char_size"),
    ("en_size_ok_but_zh_too_small", rec([("hi", box(50, 50, 10, 10), 0.95)]), "char_size"),
    ("margin_at_boundary", rec([("天地", box(10, 50, 20, 10), 0.95)]), None),
    ("margin_left_violated", rec([("天地", box(5, 50, 10, 14), 0.95)]), "edge_margin"),
    ("margin_bottom_violated", rec([("天地", box(50, 95, 20, 10), 0.95)]), "edge_margin"),
    ("blacklist_single", rec([("田", box(50, 50, 10, 10), 0.95)]), "blacklist"),
    ("blacklist_all_chars", rec([("田中", box(50, 50, 20, 10), 0.95)]), "blacklist"),
    ("blacklist_mixed_kept", rec([("田园", box(50, 50, 20, 10), 0.95)]), None),
    ("multi_text", rec([("天地", box(30, 50, 20, 10), 0.95), ("日月", box(70, 50, 20, 10), 0.9)]), "multi_text"),
    ("second_detection_low_confidence", rec([("天地", box(30, 50, 20, 10), 0.95), ("日月", box(70, 50, 20, 10), 0.5)]), None),
    ("ad_keyword_caption", rec([("天地", box(50, 50, 20, 10), 0.95)], caption="全场包邮的海报"), "keyword"),
    ("watermark_in_text_en", rec([("www.shop", box(50, 50, 40, 10), 0.95)], language="en"), "keyword"),
    ("en_too_short", rec([("a", box(50, 50, 10, 10), 0.95)], language="en"), "blacklist"),
]
