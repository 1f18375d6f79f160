from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from manuscriptor.metrics import (
    EditCosts, cer, corpus_cer, corpus_wer, lev_ratio, levenshtein, mean_lev_ratio, wer)

short = st.text(alphabet="abcá ", max_size=8)


def recursive_distance(a, b, ins=1, dele=1, sub=1):
    """Exhaustive recursion over the three edit operations."""
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j * ins
        if j == 0:
            return i * dele
        return min(d(i - 1, j) + dele, d(i, j - 1) + ins,
                   d(i - 1, j - 1) + (0 if a[i - 1] == b[j - 1] else sub))
    return d(len(a), len(b))


def test_distance_examples():
    assert levenshtein("", "abc") == 3
    assert levenshtein("x", "x") == 0
    assert levenshtein("kitten", "sitting") == recursive_distance("kitten", "sitting") == 3


def test_dp_equals_recursion_on_random_pairs(rng):
    for _ in range(500):
        a = "".join(rng.choice(list("abc"), int(rng.integers(0, 9))))
        b = "".join(rng.choice(list("abc"), int(rng.integers(0, 9))))
        assert levenshtein(a, b) == recursive_distance(a, b)


@given(short, short, st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
def test_dp_equals_recursion_with_costs(a, b, i, d, s):
    assert levenshtein(a, b, EditCosts(i, d, s)) == recursive_distance(a, b, i, d, s)


@given(short, short, short)
def test_metric_axioms(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert (levenshtein(a, b) == 0) == (a == b)


def test_distance_on_code_points():
    # combining sequences are not normalised: é (1 code point) vs e + U+0301 (2)
    assert levenshtein("é", "é") == 2


def test_negative_costs_rejected():
    with pytest.raises(ValueError):
        EditCosts(insert=-1)


def test_ratio_examples():
    assert lev_ratio("same", "same") == 1.0
    assert lev_ratio("", "abc") == 0.0
    assert lev_ratio("", "") == 1.0
    assert lev_ratio("abc", "abd") == pytest.approx(1 - 1 / 3, abs=1e-12)


@given(short, short)
def test_ratio_extremes(a, b):
    r = lev_ratio(a, b)
    assert 0.0 <= r <= 1.0
    assert (r == 1.0) == (a == b)
    if a or b:
        assert (r == 0.0) == (levenshtein(a, b) == max(len(a), len(b)))


def test_indel_ratio():
    # d2("abc", "abd") = 2 (a substitution costs 2): (6 - 2) / 6
    assert lev_ratio("abc", "abd", "indel") == pytest.approx(4 / 6)
    with pytest.raises(ValueError):
        lev_ratio("a", "b", "other")


def test_mean_ratio_is_arithmetic_mean():
    pairs = [("abc", "abd"), ("x", "x"), ("", "ab")]
    assert mean_lev_ratio(pairs) == pytest.approx((2 / 3 + 1 + 0) / 3)


def test_cer_examples():
    assert cer("hallo", "hello") == 0.2
    assert cer("", "abcd") == 1.0
    assert cer("abcdefgh", "ab") == 3.0
    with pytest.raises(ValueError):
        cer("x", "")


def test_wer_examples():
    assert wer("the cat sat", "the cat") == 0.5
    assert wer("a b c", "a b c") == 0.0
    assert wer("", "a b") == 1.0
    with pytest.raises(ValueError):
        wer("a", "   ")


@given(st.lists(st.sampled_from(["ab", "b", "cc"]), max_size=5),
       st.lists(st.sampled_from(["ab", "b", "cc"]), min_size=1, max_size=5))
def test_wer_ignores_prediction_whitespace(pred, gt):
    p = " ".join(pred)
    g = " ".join(gt)
    assert wer(f"  {p}\t ", g) == wer(p, g)


def test_corpus_aggregation_identity(rng):
    pairs = []
    for _ in range(30):
        g = "".join(rng.choice(list("ab c"), int(rng.integers(1, 12)))).strip() or "a"
        p = "".join(rng.choice(list("ab c"), int(rng.integers(0, 12))))
        pairs.append((p, g))
    num = sum(cer(p, g) * len(g) for p, g in pairs)
    assert corpus_cer(pairs) == pytest.approx(num / sum(len(g) for _, g in pairs), abs=1e-12)
    wnum = sum(wer(p, g) * len(g.split()) for p, g in pairs)
    assert corpus_wer(pairs) == pytest.approx(wnum / sum(len(g.split()) for _, g in pairs))
