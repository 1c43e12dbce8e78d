import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghacap import corpus as C
from ghacap.inference import Caption, beam_search, bleu, decode, greedy
from ghacap.model import CaptionModel, build_variant

V = 6  # pad, start, end, unk, a, b


def bigram_scorer(table):
    """Toy model: next-token log-probs depend only on the last token."""
    logp = np.log(table / table.sum(1, keepdims=True))
    return lambda prefixes: logp[np.asarray(prefixes)[:, -1]]


def random_table(seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.05, 1.0, (V, V))


def exhaustive(scorer, max_len):
    """Best caption by log-prob per generated token over every sequence the beam could emit."""
    best = None
    body = [C.UNK_ID, 4, 5, C.END_ID]
    for n in range(1, max_len + 1):
        for seq in itertools.product(body, repeat=n):
            if C.END_ID in seq[:-1]:
                continue
            full = [C.START_ID] + list(seq)
            lp = sum(float(scorer(np.array([full[:i]]))[0, full[i]]) for i in range(1, len(full)))
            finished = seq[-1] == C.END_ID
            if not finished and n < max_len:
                continue
            cap = Caption(list(seq), lp, finished)
            if best is None or (-cap.normalized, cap.tokens) < (-best.normalized, best.tokens):
                best = cap
    return best


@pytest.mark.parametrize("seed", range(8))
def test_wide_beam_equals_exhaustive(seed):
    scorer = bigram_scorer(random_table(seed))
    got = beam_search(scorer, width=10_000, max_len=4)
    want = exhaustive(scorer, 4)
    assert got.tokens == want.tokens
    assert got.logprob == pytest.approx(want.logprob, abs=1e-12)


def test_planted_bigram():
    table = np.full((V, V), 1e-3)
    table[C.START_ID, 4] = 1
    table[4, 5] = 1
    table[5, C.END_ID] = 1
    cap = beam_search(bigram_scorer(table), 3, 10)
    assert cap.tokens == [4, 5, C.END_ID] and cap.finished
    assert greedy(bigram_scorer(table), 10).tokens == [4, 5, C.END_ID]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_width_one_equals_greedy(seed):
    scorer = bigram_scorer(random_table(seed))
    a, b = beam_search(scorer, 1, 6), greedy(scorer, 6)
    assert a.tokens == b.tokens and a.logprob == pytest.approx(b.logprob, abs=1e-12)


def test_greedy_never_emits_pad_or_start():
    table = np.ones((V, V))
    table[:, C.PAD_ID] = 100
    table[:, C.START_ID] = 100
    cap = greedy(bigram_scorer(table), 5)
    assert C.PAD_ID not in cap.tokens and C.START_ID not in cap.tokens


def test_unfinished_hypotheses_respect_max_len():
    table = np.ones((V, V))
    table[:, C.END_ID] = 1e-9
    cap = beam_search(bigram_scorer(table), 3, 5)
    assert len(cap.tokens) == 5 and not cap.finished


def test_beam_rejects_zero_width():
    with pytest.raises(ValueError):
        beam_search(bigram_scorer(random_table(0)), 0)


def test_decode_on_model_is_deterministic():
    cfg = build_variant("GHA-2-3-desk")
    model = CaptionModel(cfg, seed=3)
    fm = C.generate_synthetic(0, 1)[2][0]
    a, b = decode(model, fm, 3, 8), decode(model, fm, 3, 8)
    assert a == b
    g = decode(model, fm, 0, 8)
    assert g.tokens == decode(model, fm, 1, 8).tokens


# -- BLEU ---------------------------------------------------------------------

def test_bleu_identical():
    assert bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]]) == [1.0] * 4


def test_bleu_brevity_penalty():
    scores = bleu([["the", "cat", "sat"]], [[["the", "cat", "sat", "on"]]])
    bp = math.exp(1 - 4 / 3)
    assert scores[0] == pytest.approx(bp, rel=1e-12)
    assert scores[0] == pytest.approx(0.7165, abs=1e-4)
    assert scores[2] == pytest.approx(bp, rel=1e-12)
    assert scores[3] == 0.0


def test_bleu_clipping():
    # "the the the" vs "the cat": unigram precision clipped to 1/3
    assert bleu([["the"] * 3], [[["the", "cat"]]])[0] == pytest.approx(1 / 3)


def test_bleu_corpus_pools_counts():
    cands = [["a", "b"], ["c", "d", "e", "f"]]
    refs = [[["a", "x"]], [["c", "d", "e", "f"]]]
    b1 = bleu(cands, refs)[0]
    assert b1 == pytest.approx(5 / 6)


def test_bleu_multiple_references_closest_length():
    s = bleu([["a", "b", "c"]], [[["a", "b", "c", "d", "e"], ["a", "b", "c", "x"]]])
    assert s[0] == pytest.approx(math.exp(1 - 4 / 3))


def test_bleu_smoothing_nonzero():
    raw = bleu([["a", "b"]], [[["a", "c"]]])
    smooth = bleu([["a", "b"]], [[["a", "c"]]], smoothing=True)
    assert raw[1] == 0.0 and smooth[1] > 0
    # add-one on bigrams: p1 = 1/2, p2 = 1/2
    assert smooth[1] == pytest.approx(0.5)


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [[]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
       st.lists(st.sampled_from("abcde"), min_size=1, max_size=8))
def test_bleu_in_unit_interval(c, r):
    for s in bleu([c], [[r]]) + bleu([c], [[r]], smoothing=True):
        assert 0.0 <= s <= 1.0 + 1e-12


def gamma_toy(seed, V=8):
    rng = np.random.default_rng(seed)
    t = rng.gamma(0.3, 1, (V, V)) + 1e-6
    logp = np.log(t / t.sum(1, keepdims=True))
    return lambda prefixes: logp[np.asarray(prefixes)[:, -1]]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**20), width=st.integers(1, 5), max_len=st.integers(1, 9))
def test_beam_output_well_formed(seed, width, max_len):
    cap = beam_search(gamma_toy(seed), width, max_len)
    assert 1 <= len(cap.tokens) <= max_len
    assert C.PAD_ID not in cap.tokens and C.START_ID not in cap.tokens
    assert cap.tokens.count(C.END_ID) == (1 if cap.finished else 0)
    assert not cap.finished or cap.tokens[-1] == C.END_ID


def test_end_first_gives_empty_caption():
    table = np.full((V, V), 1e-3)
    table[:, C.END_ID] = 1.0
    cap = greedy(bigram_scorer(table), 5)
    assert cap.tokens == [C.END_ID]
    assert C.build_vocab(["a"]).decode(cap.tokens) == []


def test_hand_traced_greedy():
    table = np.full((V, V), 1e-3)
    table[C.START_ID, 5] = 1
    table[5, 4] = 1
    table[4, 4] = 0.5
    table[4, C.END_ID] = 0.6
    assert greedy(bigram_scorer(table), 10).tokens == [5, 4, C.END_ID]


def test_beam_dominates_greedy_on_desk_models():
    fms = C.generate_synthetic(5, 40)[2]
    for label in ("GHA-2-3-desk", "Base-2-3-desk"):
        model = CaptionModel(build_variant(label), seed=1)
        for fm in fms:
            scorer = lambda p: model.next_log_probs(fm.grids, p)
            g, b3, b5 = greedy(scorer, 20), beam_search(scorer, 3, 20), beam_search(scorer, 5, 20)
            assert g.normalized <= b3.normalized + 1e-9
            assert b3.normalized <= b5.normalized + 1e-9


@pytest.mark.xfail(strict=True, reason="a shrinking beam can prune the greedy path; not a universal law")
def test_beam_dominance_counterexample():
    f = gamma_toy(24)
    g, b3 = greedy(f, 8), beam_search(f, 3, 8)
    assert g.normalized <= b3.normalized + 1e-9


@pytest.mark.xfail(strict=True, reason="wider beams can lose the normalized-score ranking")
def test_width_monotonicity_counterexample():
    f = gamma_toy(52)
    assert beam_search(f, 5, 8).normalized >= beam_search(f, 3, 8).normalized - 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
       st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
       st.permutations("abcde"))
def test_bleu_relabel_invariant(c, r, perm):
    relabel = dict(zip("abcde", perm))
    a = bleu([c], [[r]])
    b = bleu([[relabel[x] for x in c]], [[[relabel[x] for x in r]]])
    assert a == b
