"""Levenshtein distance and CRR/WRR aggregation, including metric-space
properties checked with hypothesis."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strlab.errors import EmptySet
from strlab.metrics import EvalReport, edit_distance, evaluate


def dp_oracle(a, b):
    m, n = len(a), len(b)
    d = np.zeros((m + 1, n + 1), dtype=int)
    d[:, 0] = np.arange(m + 1)
    d[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[m, n])


def test_identical_strings():
    assert edit_distance("abc", "abc") == 0
    assert edit_distance("", "") == 0


def test_empty_vs_nonempty():
    assert edit_distance("", "abc") == 3
    assert edit_distance("abc", "") == 3


def test_kitten_sitting():
    assert edit_distance("kitten", "sitting") == 3


def test_matches_dp_oracle_random_pairs():
    rng = np.random.default_rng(0)
    alphabet = list("abcde")
    for _ in range(500):
        a = "".join(rng.choice(alphabet, size=rng.integers(0, 12)))
        b = "".join(rng.choice(alphabet, size=rng.integers(0, 12)))
        assert edit_distance(a, b) == dp_oracle(a, b)


words = st.text(alphabet="abcdक्", max_size=10)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_symmetry(a, b):
    assert edit_distance(a, b) == edit_distance(b, a)


@settings(max_examples=200, deadline=None)
@given(words)
def test_identity(a):
    assert edit_distance(a, a) == 0


@settings(max_examples=200, deadline=None)
@given(words, words, words)
def test_triangle_inequality(a, b, c):
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


@settings(max_examples=100, deadline=None)
@given(words, words)
def test_distance_bounds(a, b):
    d = edit_distance(a, b)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


# -- evaluate -----------------------------------------------------------------


def test_all_exact_matches():
    r = evaluate([("ab", "ab"), ("cd", "cd")])
    assert (r.crr, r.wrr) == (100.0, 100.0)


def test_hand_computed_mixed():
    r = evaluate([("ab", "ab"), ("cd", "ce")])
    assert r.wrr == 50.0
    assert r.crr == 75.0


def test_all_empty_predictions_floor():
    r = evaluate([("ab", ""), ("cd", "")])
    assert (r.crr, r.wrr) == (0.0, 0.0)


def test_crr_floored_at_zero():
    r = evaluate([("a", "zzzzzz")])
    assert r.crr == 0.0


def test_permutation_invariance():
    pairs = [("ab", "ab"), ("cd", "ce"), ("xyz", "xy")]
    a = evaluate(pairs)
    b = evaluate(pairs[::-1])
    assert (a.crr, a.wrr, a.count) == (b.crr, b.wrr, b.count)


def test_per_word_flag():
    # corpus-pooled: (4-1)/4 = 75; per-word: (1 + 0.5)/2 = 75 here, so use
    # uneven lengths to tell them apart
    pairs = [("abcd", "abcd"), ("ab", "zz")]
    pooled = evaluate(pairs)
    per_word = evaluate(pairs, per_word=True)
    assert pooled.crr == pytest.approx(100.0 * 4 / 6)
    assert per_word.crr == pytest.approx(50.0)


def test_exact_match_iff_distance_zero():
    r = evaluate([("ab", "ab"), ("cd", "cd"), ("ef", "ef")])
    assert all(d == 0 for _, _, d in r.samples)
    assert r.crr == 100.0


def test_empty_set():
    with pytest.raises(EmptySet):
        evaluate([])


def test_summary_line_format():
    r = evaluate([("ab", "ab"), ("cd", "ce")])
    assert r.summary_line() == "2\t75.00\t50.00"


def test_tsv_has_per_sample_rows():
    r = evaluate([("ab", "ce")])
    assert r.tsv() == "ab\tce\t2\n1\t0.00\t0.00\n"


def test_wrr_definition():
    r = evaluate([("a", "a"), ("b", "c"), ("d", "d"), ("e", "f")])
    assert r.wrr == 50.0
    assert r.count == 4
