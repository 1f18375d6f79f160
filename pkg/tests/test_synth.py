import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from manuscriptor.raster import NoiseParams
from manuscriptor.synth import (
    HEBREW_LETTERS, CompositionParams, CorpusParams, GlyphError, GlyphSet, build_corpus,
    compose_page, layout_page, load_glyph_set, make_procedural_glyphs, read_manifest,
    save_glyph_set, segment_lines, strip_punctuation, wrap_text)

CLEAN = NoiseParams(amplitude=0.0, bias=255)


@pytest.fixture(scope="module")
def glyphs():
    return make_procedural_glyphs(HEBREW_LETTERS[:6], n_variants=3, seed=1)


def text_of(glyphs, rng, n_words=3):
    return " ".join("".join(rng.choice(glyphs.classes, int(rng.integers(1, 5))))
                    for _ in range(n_words))


def test_procedural_glyphs_distinct_and_contiguous():
    g = make_procedural_glyphs(n_variants=2, seed=0)
    assert len(g.classes) == 27 and g.classes[0] == "א"
    bases = {g.variants[c][0].tobytes() for c in g.classes}
    assert len(bases) == 27
    for c in g.classes:
        for im in g.variants[c]:
            rows = np.flatnonzero((im < 128).any(axis=1))
            assert rows[-1] - rows[0] + 1 == rows.size


def test_glyph_set_disk_round_trip(tmp_path, glyphs):
    save_glyph_set(glyphs, tmp_path)
    assert (tmp_path / "05d0" / "000.png").exists()
    back = load_glyph_set(tmp_path)
    assert back.classes == glyphs.classes
    for c in glyphs.classes:
        assert all(np.array_equal(a, b) for a, b in zip(back.variants[c], glyphs.variants[c]))


def test_glyph_set_validation():
    with pytest.raises(ValueError):
        GlyphSet(["a", "a"], {"a": [np.zeros((2, 2), np.uint8)]})
    with pytest.raises(ValueError):
        GlyphSet(["a"], {"a": []})


def test_strip_punctuation():
    assert strip_punctuation("אב, גד!  ה.") == "אב גד ה"
    assert strip_punctuation("...") == ""


@given(st.lists(st.text(alphabet="abc", min_size=1, max_size=9), max_size=12), st.integers(1, 10))
def test_wrap_text_properties(words, k):
    lines = wrap_text(" ".join(words), k)
    assert all(1 <= len(line) <= k for line in lines)
    assert "".join("".join(lines).split()) == "".join(words)


def test_wrap_text_example():
    assert wrap_text("ab cd efghij", 4) == ["ab", "cd", "efgh", "ij"]


def test_layout_is_right_to_left(glyphs, rng):
    lines = [text_of(glyphs, rng) for _ in range(4)]
    params = CompositionParams(noise=CLEAN, wave_amplitude=2.0, wave_frequency=0.05)
    lay = layout_page(lines, glyphs, params, seed=3)
    for row, text in zip(lay.lines, lines):
        assert "".join(p.char for p in row) == text.replace(" ", "")
        xs = [p.x for p in row]
        assert all(a > b for a, b in zip(xs, xs[1:]))
        assert all(p.x >= 0 and p.x + p.width <= lay.width for p in row)
    # first glyph hugs the right margin
    first = lay.lines[0][0]
    assert first.x + first.width == lay.width - params.margin


def test_spacing_example(glyphs):
    ch = glyphs.classes[0]
    params = CompositionParams(noise=CLEAN, letter_spacing=3, space_width=7)
    lay = layout_page([f"{ch}{ch} {ch}"], glyphs, params, variant_index=0)
    a, b, c = lay.lines[0]
    w = glyphs.variants[ch][0].shape[1]
    assert a.x - b.x == w + 3
    assert b.x - c.x == w + 3 + 7


def test_unknown_glyph_raises(glyphs):
    with pytest.raises(GlyphError) as info:
        layout_page(["x"], glyphs, CompositionParams())
    assert "U+0078" in str(info.value)


def test_compose_clean_page_segments_every_line(glyphs, rng):
    lines = [text_of(glyphs, rng) for _ in range(5)]
    page, meta = compose_page(lines, glyphs, CompositionParams(noise=CLEAN), seed=2)
    segs = segment_lines(page)
    assert len(segs) == 5
    for (_, top, bottom), (text, t, b) in zip(segs, meta):
        assert top <= t and b <= bottom


def test_segment_lines_example():
    page = np.full((12, 5), 255, np.uint8)
    page[2:4, 1] = 0
    page[8, 3] = 0
    segs = segment_lines(page, pad=1)
    assert [(t, b) for _, t, b in segs] == [(1, 4), (7, 9)]


def test_compose_is_deterministic(glyphs):
    lines = [glyphs.classes[0] * 3, glyphs.classes[1] * 2]
    a, _ = compose_page(lines, glyphs, CompositionParams(), seed=5)
    b, _ = compose_page(lines, glyphs, CompositionParams(), seed=5)
    c, _ = compose_page(lines, glyphs, CompositionParams(), seed=6)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_build_corpus_manifest(tmp_path, glyphs, rng):
    txt = tmp_path / "t.txt"
    txt.write_text("\n".join(text_of(glyphs, rng, 4) for _ in range(10)) + "\n", encoding="utf-8")
    (tmp_path / "empty.txt").write_text("!!!\n", encoding="utf-8")
    out = tmp_path / "corpus"
    man = build_corpus([txt, tmp_path / "empty.txt"], glyphs, CompositionParams(noise=CLEAN),
                       out, master_seed=7, corpus=CorpusParams(max_tokens=10, lines_per_page=4))
    assert man.rejected_pages == [] and len(man.skipped_files) == 1
    recs = read_manifest(out / "manifest.jsonl")
    assert len(recs) == len(man) > 0
    for r in recs:
        assert (out / r["image"]).exists() and 1 <= len(r["text"]) <= 10
    first = (out / "manifest.jsonl").read_bytes()
    build_corpus([txt], glyphs, CompositionParams(noise=CLEAN), out, master_seed=7,
                 corpus=CorpusParams(max_tokens=10, lines_per_page=4))
    assert (out / "manifest.jsonl").read_bytes() == first


def test_per_variant_mode_multiplies_pages(tmp_path, glyphs):
    txt = tmp_path / "t.txt"
    txt.write_text(glyphs.classes[0] * 3 + "\n", encoding="utf-8")
    man = build_corpus([txt], glyphs, CompositionParams(noise=CLEAN), tmp_path / "c", 0,
                       CorpusParams(variant_mode="per_variant"))
    assert sorted(r["page"] for r in man.records) == ["t_p000_v0", "t_p000_v1", "t_p000_v2"]


def test_bad_manifest_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"image": "a.png", "text": "x"}) + "\n{oops\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        read_manifest(p)


def test_composition_validation():
    with pytest.raises(ValueError):
        CompositionParams(letter_spacing=-1)
    with pytest.raises(ValueError):
        CorpusParams(variant_mode="zigzag")
