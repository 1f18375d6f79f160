"""Double-page scan splitting: gutter search on the colour image, then the
same cut applied to masks, binary images and bounding boxes."""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import load_mask_png, load_png, save_mask_png, save_png

log = logging.getLogger(__name__)

RED_THRESHOLD = 200
DEFAULT_BORDER_MARGIN = 16


@dataclass(frozen=True)
class BBox:
    label: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    def to_json(self) -> dict:
        return {"label": self.label, "x_min": self.x_min, "y_min": self.y_min,
                "x_max": self.x_max, "y_max": self.y_max}


@dataclass
class SplitRecord:
    source: str
    split_x: int | None
    outputs: list[tuple[str, int]] = field(default_factory=list)


def find_gutter(img: np.ndarray, border_margin: int = DEFAULT_BORDER_MARGIN) -> int | None:
    """Walk left along row ``h - h//3`` from ``w//2`` to the first red value below 200.

    A hit within ``border_margin`` columns of the left edge is the page's outer
    border, so the scan reports a single page (``None``).
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("find_gutter expects an RGB image")
    h, w = img.shape[:2]
    y = h - h // 3
    y = min(y, h - 1)
    red = img[y, :, 0]
    for x in range(w // 2, -1, -1):
        if red[x] < RED_THRESHOLD:
            return None if x < border_margin else x
    return None


def split_image(img: np.ndarray, split_x: int) -> tuple[np.ndarray, np.ndarray]:
    """Column partition ``[0, split_x)`` / ``[split_x, w)``; works for masks too."""
    w = img.shape[1]
    if not 0 < split_x < w:
        raise ValueError(f"split_x {split_x} outside (0, {w})")
    return img[:, :split_x].copy(), img[:, split_x:].copy()


def reassign_bbox(b: BBox, split_x: int) -> list[tuple[str, BBox]]:
    """Place a box on the left and/or right page.

    Boxes entirely left of the cut stay put, boxes at or right of it shift by
    ``-split_x``, and straddling boxes are clipped at the cut on both sides.
    Zero-width fragments are dropped.
    """
    if b.x_max < split_x:
        return [("left", b)]
    if b.x_min >= split_x:
        return [("right", BBox(b.label, b.x_min - split_x, b.y_min,
                               b.x_max - split_x, b.y_max))]
    out = []
    if split_x > b.x_min:
        out.append(("left", BBox(b.label, b.x_min, b.y_min, split_x, b.y_max)))
    if b.x_max > split_x:
        out.append(("right", BBox(b.label, 0, b.y_min, b.x_max - split_x, b.y_max)))
    return out


def load_bboxes(path) -> list[BBox]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [BBox(int(r["label"]), int(r["x_min"]), int(r["y_min"]),
                 int(r["x_max"]), int(r["y_max"])) for r in data.get("regions", [])]


def save_bboxes(boxes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"regions": [b.to_json() for b in boxes]}, fh, sort_keys=True)


def _suffixed(name: str, suffix: str) -> str:
    p = Path(name)
    return f"{p.stem}{suffix}{p.suffix}"


def split_collection(color_dir, mask_dir=None, bbox_dir=None, out_dir="split",
                     binary_dir=None, border_margin: int = DEFAULT_BORDER_MARGIN
                     ) -> list[SplitRecord]:
    """Split every colour PNG under ``color_dir`` and its companions.

    Outputs go to ``out_dir/{images,masks,binary,bboxes}`` with ``_l``/``_r``
    suffixes for split pages; single pages are copied unchanged. The gutter
    positions are written to ``out_dir/index.json`` keyed by stem.
    """
    color_dir = Path(color_dir)
    out_dir = Path(out_dir)
    dirs = {"images": out_dir / "images"}
    for key, src in (("masks", mask_dir), ("binary", binary_dir), ("bboxes", bbox_dir)):
        if src is not None:
            dirs[key] = out_dir / key
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    records, index = [], {}
    for color_path in sorted(color_dir.glob("*.png")):
        stem = color_path.stem
        img = load_png(color_path)
        if img.ndim != 3:
            raise ValueError(f"{color_path}: colour image expected")
        mask = _companion(mask_dir, color_path.name, load_mask_png)
        binary = _companion(binary_dir, color_path.name, load_png)
        for what, arr in (("mask", mask), ("binary image", binary)):
            if arr is not None and arr.shape[:2] != img.shape[:2]:
                raise ValueError(f"{stem}: {what} shape {arr.shape[:2]} != image {img.shape[:2]}")
        bbox_path = Path(bbox_dir) / f"{stem}.json" if bbox_dir is not None else None
        boxes = load_bboxes(bbox_path) if bbox_path is not None and bbox_path.exists() else None

        split_x = find_gutter(img, border_margin)
        index[stem] = split_x
        if split_x is None:
            shutil.copyfile(color_path, dirs["images"] / color_path.name)
            if mask is not None:
                shutil.copyfile(Path(mask_dir) / color_path.name, dirs["masks"] / color_path.name)
            if binary is not None:
                shutil.copyfile(Path(binary_dir) / color_path.name, dirs["binary"] / color_path.name)
            if boxes is not None:
                shutil.copyfile(bbox_path, dirs["bboxes"] / bbox_path.name)
            records.append(SplitRecord(stem, None, [("", img.shape[1])]))
            continue

        halves = dict(zip(("_l", "_r"), split_image(img, split_x)))
        for suffix, part in halves.items():
            save_png(part, dirs["images"] / _suffixed(color_path.name, suffix))
        if mask is not None:
            for suffix, part in zip(("_l", "_r"), split_image(mask, split_x)):
                save_mask_png(part, dirs["masks"] / _suffixed(color_path.name, suffix))
        if binary is not None:
            for suffix, part in zip(("_l", "_r"), split_image(binary, split_x)):
                save_png(part, dirs["binary"] / _suffixed(color_path.name, suffix))
        if boxes is not None:
            sides = {"left": [], "right": []}
            for b in boxes:
                for side, frag in reassign_bbox(b, split_x):
                    sides[side].append(frag)
            save_bboxes(sides["left"], dirs["bboxes"] / f"{stem}_l.json")
            save_bboxes(sides["right"], dirs["bboxes"] / f"{stem}_r.json")
        records.append(SplitRecord(stem, split_x, [(s, p.shape[1]) for s, p in halves.items()]))

    with open(out_dir / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
    log.info("split %d of %d pages", sum(r.split_x is not None for r in records), len(records))
    return records


def _companion(directory, name, loader):
    if directory is None:
        return None
    path = Path(directory) / name
    return loader(path) if path.exists() else None


def synthetic_double_page(rng: np.random.Generator, width: int = 640, height: int = 400,
                          gutter: int | None = None, half_width: int = 5):
    """Parchment-toned spread with dark outer border and a dark gutter band
    ``[gutter - half_width, gutter + half_width)``; returns ``(image, gutter)``."""
    img = _parchment(rng, height, width)
    if gutter is None:
        gutter = int(rng.integers(width // 2 - 40, width // 2 - half_width + 1))
    img[:, gutter - half_width:gutter + half_width] = rng.integers(20, 120, size=3)
    _border(img, rng)
    # ink on both pages, including the scan row; the right page's text starts past the centre
    for x0 in (int(rng.integers(30, 60)), width // 2 + 20):
        _ink_block(img, rng, x0, min(x0 + int(rng.integers(120, 220)), width - 30))
    return img, gutter


def synthetic_single_page(rng: np.random.Generator, width: int = 320, height: int = 400):
    """Single leaf with an outer border and text in its upper two thirds."""
    img = _parchment(rng, height, width)
    _border(img, rng)
    limit = height - height // 3 - 12
    y = 40
    while y + 8 < limit:
        x0 = int(rng.integers(30, 50))
        x1 = width - int(rng.integers(30, 50))
        img[y:y + 6, x0:x1] = rng.integers(10, 80)
        y += int(rng.integers(12, 18))
    return img


def _parchment(rng, h, w):
    base = np.array([225, 210, 180]) + rng.integers(-10, 11, size=3)
    noise = rng.integers(-10, 11, size=(h, w, 1))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _border(img, rng, thickness=None):
    t = thickness or int(rng.integers(3, 9))
    dark = rng.integers(10, 90, size=3)
    img[:t] = dark
    img[-t:] = dark
    img[:, :t] = dark
    img[:, -t:] = dark


def _ink_block(img, rng, x0, x1):
    h = img.shape[0]
    for y in range(30, h - 30, 14):
        img[y:y + 6, x0:x1] = rng.integers(10, 80)
