"""Raster primitives: PNG I/O, Perlin noise and the geometric transforms
shared by the synthesis, splitting and recognition pipelines.

Images are plain ``numpy.uint8`` arrays, shaped ``(H, W)`` for grayscale and
``(H, W, 3)`` for RGB. Masks are ``(H, W)`` label arrays stored as
indexed-colour PNGs.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError


class RasterError(Exception):
    """Base class for raster I/O failures."""


class PNGNotFoundError(RasterError, FileNotFoundError):
    pass


class MalformedPNGError(RasterError):
    pass


class UnsupportedPNGError(RasterError):
    """Valid PNG, but not 8-bit grayscale or 8-bit RGB."""


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return img


# --------------------------------------------------------------------- PNG I/O

def _open_png(path) -> PILImage.Image:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise PNGNotFoundError(path)
    try:
        im = PILImage.open(path)
        if im.format != "PNG":
            raise MalformedPNGError(f"{path}: not a PNG ({im.format})")
        im.load()
    except UnidentifiedImageError as exc:
        raise MalformedPNGError(f"{path}: {exc}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise MalformedPNGError(f"{path}: {exc}") from exc
    return im


def load_png(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into a uint8 array."""
    im = _open_png(path)
    if im.mode not in ("L", "RGB"):
        raise UnsupportedPNGError(f"{path}: unsupported PNG mode {im.mode!r}")
    return np.array(im, dtype=np.uint8)


def save_png(img: np.ndarray, path) -> None:
    img = check_image(img)
    mode = "L" if img.ndim == 2 else "RGB"
    # compress_level is pinned so identical arrays give identical bytes
    PILImage.fromarray(np.ascontiguousarray(img), mode=mode).save(
        os.fspath(path), format="PNG", compress_level=6)


def _label_palette() -> list[int]:
    # fixed, distinct colours for ids 0..15; the rest grey
    base = [
        (255, 255, 255), (230, 25, 75), (60, 180, 75), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (128, 128, 0), (0, 0, 128), (170, 110, 40), (0, 0, 0),
        (128, 0, 0), (170, 255, 195), (255, 215, 180), (128, 128, 128),
    ]
    flat = [c for rgb in base for c in rgb]
    return flat + [128] * (768 - len(flat))


def save_mask_png(labels: np.ndarray, path) -> None:
    """Write a label map as an indexed PNG whose palette indices are the ids."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("mask must be 2-D")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("mask labels must be in 0..255")
    im = PILImage.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(_label_palette())
    im.save(os.fspath(path), format="PNG", compress_level=6)


def load_mask_png(path) -> np.ndarray:
    """Read palette indices of an indexed PNG (grayscale PNGs read as values)."""
    im = _open_png(path)
    if im.mode not in ("P", "L"):
        raise UnsupportedPNGError(f"{path}: mask must be indexed or grayscale, got {im.mode!r}")
    return np.array(im, dtype=np.uint8)


# ---------------------------------------------------------------- Perlin noise

@dataclass(frozen=True)
class NoiseParams:
    cell_scale: float = 32.0
    octaves: int = 3
    persistence: float = 0.5
    seed: int = 0
    bias: int = 225
    amplitude: float = 30.0

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not self.cell_scale > 0:
            raise ValueError("cell_scale must be > 0")
        if not 0 < self.persistence <= 1:
            raise ValueError("persistence must be in (0, 1]")


@lru_cache(maxsize=64)
def permutation_table(seed: int) -> np.ndarray:
    """Seeded shuffle of 0..255, duplicated to 512 entries."""
    perm = np.random.default_rng(seed).permutation(256)
    perm.setflags(write=False)
    return np.concatenate([perm, perm])


# corner gradients (1,1), (-1,1), (-1,-1), (1,-1) selected by hash & 3
_GX = np.array([1.0, -1.0, -1.0, 1.0])
_GY = np.array([1.0, 1.0, -1.0, -1.0])


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_grid(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Vectorised 2-D Perlin noise at broadcastable coordinate arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = permutation_table(int(seed))
    x0 = np.floor(x)
    y0 = np.floor(y)
    xf = x - x0
    yf = y - y0
    xi = x0.astype(np.int64) & 255
    yi = y0.astype(np.int64) & 255

    def corner(dx, dy, ox, oy):
        h = p[p[xi + dx] + yi + dy] & 3
        return _GX[h] * (xf - ox) + _GY[h] * (yf - oy)

    u = _fade(xf)
    v = _fade(yf)
    n00 = corner(0, 0, 0.0, 0.0)
    n10 = corner(1, 0, 1.0, 0.0)
    n01 = corner(0, 1, 0.0, 1.0)
    n11 = corner(1, 1, 1.0, 1.0)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return np.clip(nx0 + v * (nx1 - nx0), -1.0, 1.0)


def perlin(x: float, y: float, seed: int) -> float:
    """Classic 2-D gradient noise in [-1, 1]; exactly 0 on the integer lattice."""
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("perlin coordinates must be finite")
    return float(perlin_grid(np.float64(x), np.float64(y), seed))


def perlin_texture(w: int, h: int, params: NoiseParams) -> np.ndarray:
    """Grayscale texture: bias + amplitude * sum_k persistence^k * noise_k.

    Octave ``k`` halves the cell size and uses seed ``params.seed + k``.
    """
    if w < 1 or h < 1:
        raise ValueError("texture dimensions must be >= 1")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    total = np.zeros((h, w))
    for k in range(params.octaves):
        scale = params.cell_scale / (2.0 ** k)
        total += params.persistence ** k * perlin_grid(xs / scale, ys / scale, params.seed + k)
    out = params.bias + params.amplitude * total
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------ transforms

def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def _linear_weights(n_out: int, n_in: int):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    img = check_image(img)
    in_h, in_w = img.shape[:2]
    if mode == "nearest":
        ri = _nearest_index(out_h, in_h)
        ci = _nearest_index(out_w, in_w)
        return img[ri][:, ci].copy()
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    if (out_h, out_w) == (in_h, in_w):
        return img.copy()
    f = img.astype(np.float64)
    r0, r1, rw = _linear_weights(out_h, in_h)
    c0, c1, cw = _linear_weights(out_w, in_w)
    extra = (1,) * (f.ndim - 2)
    rw = rw.reshape((-1, 1) + extra)
    cw = cw.reshape((1, -1) + extra)
    rows = f[r0] * (1 - rw) + f[r1] * rw
    out = rows[:, c0] * (1 - cw) + rows[:, c1] * cw
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_height(img: np.ndarray, target_h: int, mode: str = "bilinear") -> np.ndarray:
    """Scale to ``target_h`` rows keeping the aspect ratio (width rounded, min 1)."""
    if target_h < 1:
        raise ValueError("target_h must be >= 1")
    img = check_image(img)
    h, w = img.shape[:2]
    new_w = max(1, int(round(w * target_h / h)))
    if target_h == h and new_w == w:
        return img.copy()
    return resize(img, target_h, new_w, mode)


def pad_right(img: np.ndarray, target_w: int, fill: int = 255) -> tuple[np.ndarray, int]:
    img = check_image(img)
    w = img.shape[1]
    if target_w < w:
        raise ValueError(f"target width {target_w} smaller than image width {w}")
    shape = (img.shape[0], target_w) + img.shape[2:]
    out = np.full(shape, fill, dtype=np.uint8)
    out[:, :w] = img
    return out, w


def blackout_from(img: np.ndarray, from_x: int) -> np.ndarray:
    """Zero every column at or right of ``from_x``."""
    img = check_image(img)
    if not 0 <= from_x <= img.shape[1]:
        raise ValueError(f"from_x {from_x} outside [0, {img.shape[1]}]")
    out = img.copy()
    out[:, from_x:] = 0
    return out
