import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapecap import metrics

from oracles import cider_oracle, lcs_length

WORDS = ["a", "the", "circle", "square", "cat", "sat", "red", "blue"]


def sentences(rng, n, lo=1, hi=7):
    return [[rng.choice(WORDS) for _ in range(rng.randint(lo, hi))] for _ in range(n)]


# ---------------------------------------------------------------------------
# BLEU


def test_bleu_perfect_match_is_one():
    cands = [["a", "red", "circle"], ["the", "cat", "sat", "down"]]
    refs = [[c] for c in cands]
    for n in (1, 2, 3):
        assert metrics.bleu(cands, refs, n) == pytest.approx(1.0)


def test_bleu_zero_overlap_is_tiny():
    cands = [["blue", "square"]]
    refs = [[["red", "circle"]]]
    assert metrics.bleu(cands, refs, 1) < 1e-6


def test_bleu_hand_computed_brevity_penalty():
    # candidate "the cat sat" vs reference "the cat sat down":
    # unigram precision 1.0, brevity penalty exp(1 - 4/3)
    value = metrics.bleu([["the", "cat", "sat"]], [[["the", "cat", "sat", "down"]]], 1)
    assert value == pytest.approx(math.exp(1.0 - 4.0 / 3.0), abs=1e-12)
    assert value == pytest.approx(0.7165313105737893, abs=1e-12)


def test_bleu_monotone_in_overlap():
    ref = [["a", "red", "circle", "sat"]]
    worse = metrics.bleu([["a", "blue", "square", "sat"]], [ref], 1)
    better = metrics.bleu([["a", "red", "square", "sat"]], [ref], 1)
    assert better > worse


def test_bleu_rejects_empty_corpus():
    with pytest.raises(ValueError):
        metrics.bleu([], [], 1)


# ---------------------------------------------------------------------------
# ROUGE-L


def test_rouge_identical_is_one():
    cands = [["a", "red", "circle"]]
    assert metrics.rouge_l(cands, [[["a", "red", "circle"]]]) == pytest.approx(1.0)


def test_rouge_disjoint_is_zero():
    assert metrics.rouge_l([["a", "b"]], [[["c", "d"]]]) == 0.0


def test_rouge_matches_dp_lcs_oracle():
    rng = random.Random(7)
    cands = sentences(rng, 30, 5, 5)
    refs = [[rng.choice(cands)] for _ in cands]
    got = metrics.rouge_l(cands, refs)
    beta_sq = 1.2
    expect = 0.0
    for cand, (ref,) in zip(cands, refs):
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        expect += (1 + beta_sq) * p * r / (r + beta_sq * p)
    assert got == pytest.approx(expect / len(cands), abs=1e-12)


# ---------------------------------------------------------------------------
# CIDEr


def test_cider_zero_overlap_is_zero():
    cands = [["blue", "square"], ["red", "circle"]]
    refs = [[["cat", "sat"]], [["dog", "ran"]]]
    assert metrics.cider(cands, refs) == 0.0


def test_cider_matches_frozen_oracle_value():
    # expected value computed by the independent oracle before this
    # implementation existed
    cands = [["a", "red", "circle"], ["a", "blue", "square"]]
    refs = [
        [["a", "red", "circle"], ["the", "red", "circle", "sits"]],
        [["the", "blue", "square"], ["a", "square"]],
    ]
    assert metrics.cider(cands, refs) == pytest.approx(4.019907282861336, abs=1e-6)


def test_cider_matches_oracle_on_random_corpora():
    rng = random.Random(3)
    cands = sentences(rng, 12)
    refs = [sentences(rng, rng.randint(1, 3)) for _ in cands]
    assert metrics.cider(cands, refs) == pytest.approx(cider_oracle(cands, refs), abs=1e-9)


def test_cider_invariant_under_reference_duplication():
    rng = random.Random(5)
    cands = sentences(rng, 8)
    refs = [sentences(rng, 2) for _ in cands]
    dup = [r + r for r in refs]
    assert metrics.cider(cands, dup) == pytest.approx(metrics.cider(cands, refs), abs=1e-12)
    assert metrics.cider(cands, dup) == pytest.approx(cider_oracle(cands, dup), abs=1e-9)


# ---------------------------------------------------------------------------
# shared properties


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(pyrandom):
    cands = sentences(pyrandom, 6)
    refs = [sentences(pyrandom, 2) for _ in cands]
    order = list(range(len(cands)))
    pyrandom.shuffle(order)
    shuffled_c = [cands[i] for i in order]
    shuffled_r = [refs[i] for i in order]
    assert metrics.bleu(shuffled_c, shuffled_r, 4) == pytest.approx(
        metrics.bleu(cands, refs, 4), abs=1e-12
    )
    assert metrics.rouge_l(shuffled_c, shuffled_r) == pytest.approx(
        metrics.rouge_l(cands, refs), abs=1e-12
    )
    assert metrics.cider(shuffled_c, shuffled_r) == pytest.approx(
        metrics.cider(cands, refs), abs=1e-12
    )


def test_corpus_against_itself_scores_one():
    rng = random.Random(11)
    cands = sentences(rng, 10, 4, 8)
    refs = [[c] for c in cands]
    report = metrics.evaluate(cands, refs)
    assert report.b1 == pytest.approx(1.0)
    assert report.b2 == pytest.approx(1.0)
    assert report.b3 == pytest.approx(1.0)
    assert report.b4 == pytest.approx(1.0)
    assert report.rouge_l == pytest.approx(1.0)
    assert report.corpus_size == 10
