"""Synthetic manuscript corpus: right-to-left page composition from glyph
images over Perlin backgrounds, projection-profile line segmentation, and
image/text manifests."""
from __future__ import annotations

import json
import logging
import math
import os
import unicodedata
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .raster import NoiseParams, load_png, perlin_texture, save_png

log = logging.getLogger(__name__)

# the 27 Hebrew letter forms: 22 letters plus 5 final forms, U+05D0..U+05EA
HEBREW_LETTERS = tuple(chr(c) for c in range(0x05D0, 0x05EB))
DARK = 128


class GlyphError(KeyError):
    def __str__(self):
        return f"no glyph for character {self.args[0]!r} (U+{ord(self.args[0]):04X})"


@dataclass
class GlyphSet:
    """Character identifiers and their grayscale variant images."""

    classes: list[str]
    variants: dict[str, list[np.ndarray]]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("glyph classes must be unique")
        for c in self.classes:
            imgs = self.variants.get(c)
            if not imgs:
                raise ValueError(f"glyph class {c!r} has no variants")
            for im in imgs:
                if im.ndim != 2 or im.dtype != np.uint8:
                    raise ValueError(f"glyph {c!r} variants must be uint8 grayscale")

    @property
    def codepoints(self) -> dict[str, int]:
        return {c: ord(c) for c in self.classes}

    @property
    def max_height(self) -> int:
        return max(im.shape[0] for c in self.classes for im in self.variants[c])

    @property
    def mean_width(self) -> float:
        widths = [im.shape[1] for c in self.classes for im in self.variants[c]]
        return float(np.mean(widths))

    def subset(self, chars: Sequence[str]) -> "GlyphSet":
        return GlyphSet(list(chars), {c: self.variants[c] for c in chars})


def save_glyph_set(glyphs: GlyphSet, directory) -> None:
    """One sub-directory per class, named by lowercase hex code point."""
    directory = Path(directory)
    for c in glyphs.classes:
        sub = directory / f"{ord(c):04x}"
        sub.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(glyphs.variants[c]):
            save_png(im, sub / f"{i:03d}.png")


def load_glyph_set(directory) -> GlyphSet:
    directory = Path(directory)
    classes, variants = [], {}
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        try:
            ch = chr(int(sub.name, 16))
        except ValueError:
            log.warning("ignoring glyph directory %s (not a hex code point)", sub)
            continue
        imgs = []
        for f in sorted(sub.glob("*.png")):
            im = load_png(f)
            if im.ndim == 3:
                im = np.asarray(PILImage.fromarray(im).convert("L"))
            imgs.append(im)
        if imgs:
            classes.append(ch)
            variants[ch] = imgs
    if not classes:
        raise ValueError(f"no glyph classes found under {directory}")
    return GlyphSet(classes, variants)


def _ink_rows(im: np.ndarray) -> np.ndarray:
    return np.flatnonzero((im < DARK).any(axis=1))


def _contiguous(rows: np.ndarray) -> bool:
    return rows.size > 0 and rows[-1] - rows[0] + 1 == rows.size


def make_procedural_glyphs(chars: Sequence[str] = HEBREW_LETTERS, n_variants: int = 1,
                           height: int = 16, width: int = 12, seed: int = 0) -> GlyphSet:
    """Stroke-drawn stand-in glyphs for environments without scanned letters.

    Each class is a fixed set of 2-4 strokes between points of a 3x4 anchor
    grid; variants jitter the anchors by up to one pixel. Ink rows of every
    glyph form one contiguous band.
    """
    rng = np.random.default_rng(seed)
    xs = np.linspace(1, width - 2, 3)
    ys = np.linspace(1, height - 2, 4)
    anchors = [(x, y) for y in ys for x in xs]
    seen = set()
    classes, variants = [], {}
    for ch in chars:
        while True:
            n = int(rng.integers(2, 5))
            strokes = set()
            while len(strokes) < n:
                a, b = rng.choice(len(anchors), size=2, replace=False)
                strokes.add((min(a, b), max(a, b)))
            key = frozenset(strokes)
            if key in seen:
                continue
            base = _draw_strokes(anchors, key, height, width, 0.0, rng, jitter=False)
            if _contiguous(_ink_rows(base)):
                break
        seen.add(key)
        imgs = [base]
        while len(imgs) < n_variants:
            im = _draw_strokes(anchors, key, height, width, 1.0, rng, jitter=True)
            if _contiguous(_ink_rows(im)):
                imgs.append(im)
        classes.append(ch)
        variants[ch] = imgs
    return GlyphSet(classes, variants)


def _draw_strokes(anchors, strokes, height, width, jitter_px, rng, jitter):
    im = PILImage.new("L", (width, height), 255)
    draw = ImageDraw.Draw(im)
    pts = list(anchors)
    if jitter:
        pts = [(float(np.clip(x + rng.uniform(-jitter_px, jitter_px), 0, width - 1)),
                float(np.clip(y + rng.uniform(-jitter_px, jitter_px), 0, height - 1)))
               for x, y in pts]
    ink = 30
    for a, b in sorted(strokes):
        draw.line([pts[a], pts[b]], fill=ink, width=2)
    return np.asarray(im, dtype=np.uint8).copy()


# ------------------------------------------------------------------ composition

@dataclass(frozen=True)
class CompositionParams:
    letter_spacing: int = 2
    space_width: int = 8
    wave_amplitude: float = 0.0
    wave_frequency: float = 0.0
    line_height: int = 22
    margin: int = 6
    noise: NoiseParams = field(default_factory=NoiseParams)
    variant_seed: int = 0

    def __post_init__(self):
        if self.letter_spacing < 0:
            raise ValueError("letter_spacing must be >= 0")
        if self.space_width < 1:
            raise ValueError("space_width must be >= 1")
        if self.wave_amplitude < 0 or self.wave_frequency < 0:
            raise ValueError("wave amplitude and frequency must be >= 0")


@dataclass(frozen=True)
class Placement:
    char: str
    variant: int
    x: int  # left column
    y: int  # top row
    width: int
    height: int


@dataclass
class PageLayout:
    width: int
    height: int
    lines: list[list[Placement]]


def strip_punctuation(text: str) -> str:
    """Keep letters only; whitespace runs become single spaces."""
    out = []
    for ch in text:
        if ch.isspace():
            out.append(" ")
        elif unicodedata.category(ch).startswith("L"):
            out.append(ch)
    return " ".join("".join(out).split())


def wrap_text(text: str, max_tokens: int) -> list[str]:
    """Greedy word wrap to at most ``max_tokens`` characters per line."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    lines, cur = [], ""
    for word in text.split():
        while len(word) > max_tokens:
            if cur:
                lines.append(cur)
                cur = ""
            lines.append(word[:max_tokens])
            word = word[max_tokens:]
        if not cur:
            cur = word
        elif len(cur) + 1 + len(word) <= max_tokens:
            cur = f"{cur} {word}"
        else:
            lines.append(cur)
            cur = word
    if cur:
        lines.append(cur)
    return lines


def wave_offset(x: float, params: CompositionParams) -> int:
    return int(round(params.wave_amplitude * math.sin(2 * math.pi * params.wave_frequency * x)))


def layout_page(lines: Sequence[str], glyphs: GlyphSet, params: CompositionParams,
                seed: int = 0, variant_index: int | None = None) -> PageLayout:
    """Glyph placements for a page, right to left, without rendering."""
    if not lines:
        raise ValueError("page needs at least one line")
    table = set(glyphs.classes)
    for line in lines:
        for ch in line:
            if ch != " " and ch not in table:
                raise GlyphError(ch)
    if params.line_height < glyphs.max_height:
        raise ValueError("line_height smaller than the tallest glyph")
    rng = np.random.default_rng([params.variant_seed, seed])
    chosen = []
    for line in lines:
        row = []
        for ch in line:
            if ch == " ":
                row.append(None)
                continue
            n = len(glyphs.variants[ch])
            v = variant_index % n if variant_index is not None else int(rng.integers(n))
            row.append(v)
        chosen.append(row)

    def advance(line, row):
        total = 0
        for ch, v in zip(line, row):
            if v is None:
                total += params.space_width
            else:
                total += glyphs.variants[ch][v].shape[1] + params.letter_spacing
        return total

    max_chars = max(len(line) for line in lines)
    nominal = int(math.ceil(max_chars * (glyphs.mean_width + params.letter_spacing)))
    needed = max(advance(line, row) for line, row in zip(lines, chosen))
    width = max(nominal, needed) + 2 * params.margin
    height = len(lines) * params.line_height + 2 * params.margin

    placed = []
    for i, (line, row) in enumerate(zip(lines, chosen)):
        cursor = width - params.margin
        top = params.margin + i * params.line_height
        out = []
        for ch, v in zip(line, row):
            if v is None:
                cursor -= params.space_width
                continue
            g = glyphs.variants[ch][v]
            gh, gw = g.shape
            x = cursor - gw
            y = top + (params.line_height - gh) // 2 + wave_offset(x, params)
            out.append(Placement(ch, v, x, y, gw, gh))
            cursor = x - params.letter_spacing
        placed.append(out)
    return PageLayout(width, height, placed)


def _page_noise(params: CompositionParams, seed: int) -> NoiseParams:
    mixed = int(np.random.SeedSequence([params.noise.seed, seed]).generate_state(1)[0])
    return replace(params.noise, seed=mixed)


def render_layout(layout: PageLayout, glyphs: GlyphSet, params: CompositionParams,
                  seed: int = 0) -> tuple[np.ndarray, list[tuple[int, int]]]:
    canvas = perlin_texture(layout.width, layout.height, _page_noise(params, seed))
    ranges = []
    for row in layout.lines:
        top = bottom = None
        for p in row:
            g = glyphs.variants[p.char][p.variant]
            y0, y1 = max(p.y, 0), min(p.y + p.height, layout.height)
            x0, x1 = max(p.x, 0), min(p.x + p.width, layout.width)
            if y0 >= y1 or x0 >= x1:
                continue
            patch = g[y0 - p.y:y1 - p.y, x0 - p.x:x1 - p.x]
            np.minimum(canvas[y0:y1, x0:x1], patch, out=canvas[y0:y1, x0:x1])
            ink = _ink_rows(patch)
            if ink.size:
                t, b = y0 + int(ink[0]), y0 + int(ink[-1])
                top = t if top is None else min(top, t)
                bottom = b if bottom is None else max(bottom, b)
        if top is None:
            raise ValueError("line has no ink")
        ranges.append((top, bottom))
    return canvas, ranges


def compose_page(lines: Sequence[str], glyphs: GlyphSet, params: CompositionParams,
                 seed: int = 0, variant_index: int | None = None):
    """Render ``lines`` right to left over a Perlin canvas.

    Returns the page and, per line, ``(text, y_top, y_bottom)`` with the
    inclusive row range of its ink.
    """
    layout = layout_page(lines, glyphs, params, seed, variant_index)
    page, ranges = render_layout(layout, glyphs, params, seed)
    return page, [(text, t, b) for text, (t, b) in zip(lines, ranges)]


def segment_lines(page: np.ndarray, threshold: float = 0.0, pad: int = 2):
    """Projection-profile line segmentation.

    Rows whose dark-pixel fraction exceeds ``threshold`` are ink rows; each
    maximal run becomes a crop of the page padded by ``pad`` rows. Returns
    ``(image, y_top, y_bottom)`` with inclusive bounds, top to bottom.
    """
    if page.ndim != 2:
        raise ValueError("segment_lines expects a grayscale page")
    profile = (page < DARK).mean(axis=1)
    ink = profile > threshold
    out = []
    h = page.shape[0]
    y = 0
    while y < h:
        if not ink[y]:
            y += 1
            continue
        start = y
        while y < h and ink[y]:
            y += 1
        top = max(start - pad, 0)
        bottom = min(y - 1 + pad, h - 1)
        out.append((page[top:bottom + 1].copy(), top, bottom))
    return out


# ----------------------------------------------------------------------- corpus

@dataclass(frozen=True)
class CorpusParams:
    max_tokens: int = 24
    lines_per_page: int = 8
    seg_threshold: float = 0.0
    variant_mode: str = "random"  # or "per_variant": one pass per glyph variant
    max_pairs: int | None = None

    def __post_init__(self):
        if self.variant_mode not in ("random", "per_variant"):
            raise ValueError(f"unknown variant_mode {self.variant_mode!r}")
        if self.lines_per_page < 1:
            raise ValueError("lines_per_page must be >= 1")


@dataclass
class Manifest:
    path: Path
    records: list[dict]
    rejected_pages: list[str] = field(default_factory=list)
    skipped_files: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def page_seed(master_seed: int, file_index: int, page_index: int, variant: int = 0) -> int:
    return int(np.random.SeedSequence(
        [master_seed, file_index, page_index, variant]).generate_state(1)[0])


def _page_job(job):
    page_id, lines, glyphs, params, seed, variant_index, threshold = job
    page, ranges = compose_page(lines, glyphs, params, seed, variant_index)
    segs = segment_lines(page, threshold)
    return page_id, lines, [s[0] for s in segs], len(segs) == len(lines)


def build_corpus(text_files: Sequence, glyphs: GlyphSet, params: CompositionParams,
                 out_dir, master_seed: int, corpus: CorpusParams = CorpusParams(),
                 jobs: int = 1) -> Manifest:
    """Compose, segment and pair every page of every text file.

    Writes ``images/<page>_<line>.png`` and ``manifest.jsonl`` under
    ``out_dir``. Pages whose segment count differs from their line count are
    rejected and logged.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    table = set(glyphs.classes)
    page_jobs = []
    skipped = []
    n_variants = max(len(glyphs.variants[c]) for c in glyphs.classes)
    passes = range(n_variants) if corpus.variant_mode == "per_variant" else [None]
    for fi, path in enumerate(text_files):
        path = Path(path)
        try:
            raw = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise OSError(f"cannot read text file {path}: {exc}") from exc
        lines = []
        for logical in raw.splitlines():
            lines.extend(wrap_text(strip_punctuation(logical), corpus.max_tokens))
        if not lines:
            log.info("skipping %s: no text after filtering", path)
            skipped.append(str(path))
            continue
        for line in lines:
            for ch in line:
                if ch != " " and ch not in table:
                    raise GlyphError(ch)
        for v in passes:
            for pi in range(0, len(lines), corpus.lines_per_page):
                page_lines = lines[pi:pi + corpus.lines_per_page]
                page_no = pi // corpus.lines_per_page
                page_id = f"{path.stem}_p{page_no:03d}" + ("" if v is None else f"_v{v}")
                seed = page_seed(master_seed, fi, page_no, 0 if v is None else v + 1)
                page_jobs.append((page_id, page_lines, glyphs, params, seed, v,
                                  corpus.seg_threshold))

    if jobs > 1 and len(page_jobs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_page_job, page_jobs, chunksize=4))
    else:
        results = map(_page_job, page_jobs)

    records, rejected = [], []
    for page_id, lines, crops, ok in results:
        if not ok:
            log.warning("rejecting page %s: %d segments for %d lines",
                        page_id, len(crops), len(lines))
            rejected.append(page_id)
            continue
        for li, (text, crop) in enumerate(zip(lines, crops)):
            if corpus.max_pairs is not None and len(records) >= corpus.max_pairs:
                break
            rel = f"images/{page_id}_{li:03d}.png"
            save_png(crop, out_dir / rel)
            records.append({"image": rel, "text": text, "page": page_id, "line": li})
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    return Manifest(manifest_path, records, rejected, skipped)


def write_manifest(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def read_manifest(path) -> list[dict]:
    """Records with an extra ``path`` key: the image resolved against the manifest."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["path"] = str(path.parent / rec["image"])
                rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad manifest record ({exc})") from exc
            out.append(rec)
    return out
