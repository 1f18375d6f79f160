import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manuscriptor.raster import (
    MalformedPNGError, NoiseParams, PNGNotFoundError, UnsupportedPNGError, blackout_from,
    load_mask_png, load_png, pad_right, perlin, perlin_texture, permutation_table, resize,
    resize_height, save_mask_png, save_png)


def write_png_by_hand(path, rows, colour_type):
    """Minimal PNG encoder (filter 0 on every row) independent of Pillow."""
    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    h = len(rows)
    channels = 3 if colour_type == 2 else 1
    w = len(rows[0]) // channels
    raw = b"".join(b"\x00" + bytes(r) for r in rows)
    blob = (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, colour_type, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw))
            + chunk(b"IEND", b""))
    path.write_bytes(blob)


def test_white_pixel(tmp_path):
    p = tmp_path / "w.png"
    write_png_by_hand(p, [[255]], colour_type=0)
    img = load_png(p)
    assert img.shape == (1, 1) and img.dtype == np.uint8 and img[0, 0] == 255


def test_black_pixel_round_trip(tmp_path):
    p = tmp_path / "b.png"
    save_png(np.zeros((1, 1), np.uint8), p)
    assert load_png(p).tolist() == [[0]]


def test_rgb_pattern_from_reference_encoder(tmp_path):
    rows = [[255, 0, 0, 0, 255, 0], [0, 0, 255, 10, 20, 30]]
    p = tmp_path / "rgb.png"
    write_png_by_hand(p, rows, colour_type=2)
    img = load_png(p)
    assert img.shape == (2, 2, 3)
    assert img.reshape(-1).tolist() == rows[0] + rows[1]


def test_save_then_load_is_byte_identical(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_png(img, a)
    save_png(load_png(a), b)
    assert a.read_bytes() == b.read_bytes()


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9)))
       | arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_png_round_trip_property(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("rt") / "x.png"
    save_png(img, p)
    assert np.array_equal(load_png(p), img)


def test_hundred_random_round_trips(tmp_path, rng):
    ok = 0
    for i in range(100):
        shape = (int(rng.integers(1, 20)), int(rng.integers(1, 20)))
        if i % 2:
            shape += (3,)
        img = rng.integers(0, 256, size=shape, dtype=np.uint8)
        save_png(img, tmp_path / "r.png")
        ok += np.array_equal(load_png(tmp_path / "r.png"), img)
    assert ok == 100


def test_png_errors_are_distinct(tmp_path):
    with pytest.raises(PNGNotFoundError):
        load_png(tmp_path / "missing.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(MalformedPNGError):
        load_png(bad)
    from PIL import Image
    Image.new("I;16", (2, 2)).save(tmp_path / "deep.png")
    with pytest.raises(UnsupportedPNGError):
        load_png(tmp_path / "deep.png")


def test_mask_png_keeps_label_ids(tmp_path, rng):
    labels = rng.integers(0, 12, size=(6, 9)).astype(np.uint8)
    save_mask_png(labels, tmp_path / "m.png")
    assert np.array_equal(load_mask_png(tmp_path / "m.png"), labels)


# ----------------------------------------------------------------- Perlin

def reference_perlin(x, y, seed):
    """Straight-line classic Perlin with scalar arithmetic."""
    perm = [int(v) for v in np.random.default_rng(seed).permutation(256)] * 2
    X, Y = math.floor(x), math.floor(y)
    fx, fy = x - X, y - Y
    X &= 255
    Y &= 255

    def grad(h, dx, dy):
        h &= 3
        gx = 1.0 if h in (0, 3) else -1.0
        gy = 1.0 if h in (0, 1) else -1.0
        return gx * dx + gy * dy

    def fade(t):
        return 6 * t ** 5 - 15 * t ** 4 + 10 * t ** 3

    aa = perm[perm[X] + Y]
    ba = perm[perm[X + 1] + Y]
    ab = perm[perm[X] + Y + 1]
    bb = perm[perm[X + 1] + Y + 1]
    u, v = fade(fx), fade(fy)
    x1 = grad(aa, fx, fy) + u * (grad(ba, fx - 1, fy) - grad(aa, fx, fy))
    x2 = grad(ab, fx, fy - 1) + u * (grad(bb, fx - 1, fy - 1) - grad(ab, fx, fy - 1))
    return x1 + v * (x2 - x1)


def test_perlin_vanishes_on_lattice():
    assert perlin(3.0, 7.0, 0) == 0.0
    for s in range(5):
        for x in range(-3, 4):
            assert perlin(float(x), float(2 * x + 1), s) == 0.0


def test_perlin_is_deterministic():
    assert perlin(1.37, 2.91, 9) == perlin(1.37, 2.91, 9)


def test_perlin_matches_reference_at_half():
    expected = reference_perlin(0.5, 0.5, 1)
    assert abs(perlin(0.5, 0.5, 1) - expected) <= 1e-12
    assert expected == pytest.approx(-0.25, abs=1e-12)  # frozen oracle value


@given(st.floats(-300, 300), st.floats(-300, 300), st.integers(0, 50))
def test_perlin_matches_reference_everywhere(x, y, seed):
    assert abs(perlin(x, y, seed) - reference_perlin(x, y, seed)) <= 1e-12


def test_perlin_bounded_on_random_points(rng):
    from manuscriptor.raster import perlin_grid
    pts = rng.uniform(-500, 500, size=(2, 20000))
    vals = perlin_grid(pts[0], pts[1], 3)
    assert np.all(np.abs(vals) <= 1.0)


def test_permutation_table_is_doubled_shuffle():
    t = permutation_table(5)
    assert t.shape == (512,)
    assert sorted(t[:256].tolist()) == list(range(256))
    assert np.array_equal(t[:256], t[256:])


def test_texture_constant_when_amplitude_zero():
    img = perlin_texture(9, 4, NoiseParams(amplitude=0.0, bias=200))
    assert np.all(img == 200)


def test_texture_deterministic():
    p = NoiseParams(seed=11)
    assert np.array_equal(perlin_texture(20, 10, p), perlin_texture(20, 10, p))


def test_texture_matches_formula_pixelwise():
    p = NoiseParams(cell_scale=8.0, octaves=1, seed=42, bias=128, amplitude=60.0)
    img = perlin_texture(16, 16, p)
    for y in range(16):
        for x in range(16):
            v = p.bias + p.amplitude * reference_perlin(x / 8.0, y / 8.0, 42)
            assert img[y, x] == min(255, max(0, round(v)))


def test_texture_octaves_follow_formula():
    p = NoiseParams(cell_scale=16.0, octaves=3, persistence=0.5, seed=4, bias=120, amplitude=90)
    img = perlin_texture(12, 9, p)
    for y in range(9):
        for x in range(12):
            total = sum(0.5 ** k * reference_perlin(x / (16.0 / 2 ** k), y / (16.0 / 2 ** k), 4 + k)
                        for k in range(3))
            assert img[y, x] == min(255, max(0, round(120 + 90 * total)))


def test_noise_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(octaves=0)
    with pytest.raises(ValueError):
        NoiseParams(cell_scale=0)


# -------------------------------------------------------------- transforms

def test_resize_height_halves():
    img = np.zeros((64, 32), np.uint8)
    assert resize_height(img, 32).shape == (32, 16)


def test_resize_height_identity_nearest(rng):
    img = rng.integers(0, 256, (10, 13), dtype=np.uint8)
    assert np.array_equal(resize_height(img, 10, "nearest"), img)


def test_checkerboard_nearest_doubles():
    board = (np.indices((3, 3)).sum(axis=0) % 2 * 255).astype(np.uint8)
    out = resize_height(board, 6, "nearest")
    expected = np.repeat(np.repeat(board, 2, axis=0), 2, axis=1)
    assert np.array_equal(out, expected)


@given(arrays(np.uint8, st.tuples(st.integers(1, 30), st.integers(1, 30))), st.integers(1, 40))
def test_nearest_introduces_no_new_values(img, target):
    out = resize_height(img, target, "nearest")
    assert out.shape[0] == target
    assert abs(out.shape[1] - img.shape[1] * target / img.shape[0]) <= 0.5 + 1e-9 or out.shape[1] == 1
    assert set(np.unique(out)) <= set(np.unique(img))


def test_bilinear_constant_stays_constant():
    img = np.full((7, 11, 3), 77, np.uint8)
    assert np.all(resize(img, 13, 5) == 77)


def test_pad_right_example():
    img = np.zeros((4, 50), np.uint8)
    out, start = pad_right(img, 80, 255)
    assert start == 50 and out.shape == (4, 80)
    assert np.all(out[:, 50:] == 255) and np.all(out[:, :50] == 0)


def test_pad_right_identity_and_error(rng):
    img = rng.integers(0, 256, (3, 6), dtype=np.uint8)
    out, start = pad_right(img, 6)
    assert start == 6 and np.array_equal(out, img)
    with pytest.raises(ValueError):
        pad_right(img, 5)


@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 20))), st.integers(0, 20),
       st.integers(0, 255))
def test_pad_right_prefix_and_suffix(img, extra, fill):
    out, start = pad_right(img, img.shape[1] + extra, fill)
    assert np.array_equal(out[:, :start], img)
    assert np.all(out[:, start:] == fill)


def test_blackout_edges(rng):
    img = rng.integers(1, 256, (5, 9), dtype=np.uint8)
    assert np.array_equal(blackout_from(img, 9), img)
    assert np.all(blackout_from(img, 0) == 0)
    with pytest.raises(ValueError):
        blackout_from(img, 10)


@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 20))), st.integers(0, 20))
def test_pad_then_blackout(img, extra):
    out, start = pad_right(img, img.shape[1] + extra)
    black = blackout_from(out, start)
    assert np.array_equal(black[:, :start], img)
    assert np.all(black[:, start:] == 0)
