"""Greedy and beam-search caption decoding, plus BLEU."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import END_ID, PAD_ID, START_ID

BEAM_WIDTH = 3
MAX_LEN = 20


@dataclass
class Caption:
    tokens: list  # generated ids after <start>; ends with <end> when finished
    logprob: float
    finished: bool

    @property
    def normalized(self):
        return self.logprob / max(len(self.tokens), 1)


def model_scorer(model, feature_maps):
    """Adapt a CaptionModel and one example's grids to the ``prefixes -> log-probs`` callable."""
    grids = feature_maps.grids if hasattr(feature_maps, "grids") else feature_maps
    return lambda prefixes: model.next_log_probs(grids, prefixes)


def _masked(logp):
    logp = np.array(logp, dtype=np.float64)
    logp[:, PAD_ID] = -np.inf
    logp[:, START_ID] = -np.inf
    return logp


def greedy(scorer, max_len=MAX_LEN) -> Caption:
    """Take the most likely next token until <end> or ``max_len`` tokens (ties: lowest id)."""
    seq, total = [START_ID], 0.0
    for _ in range(max_len):
        scores = total + _masked(scorer(np.array([seq])))[0]
        tok = int(np.argmax(scores))
        total = float(scores[tok])
        seq.append(tok)
        if tok == END_ID:
            return Caption(seq[1:], total, True)
    return Caption(seq[1:], total, False)


def beam_search(scorer, width=BEAM_WIDTH, max_len=MAX_LEN) -> Caption:
    """Beam search whose active width shrinks by one per finished hypothesis.

    Candidates are ranked by cumulative log-prob (ties: smaller token
    sequence). The winner among finished hypotheses, plus any still open at
    ``max_len``, is the one with the highest log-prob per generated token.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    live = [([START_ID], 0.0)]
    done = []
    for _ in range(max_len):
        logp = _masked(scorer(np.array([s for s, _ in live])))
        total = np.array([sc for _, sc in live])[:, None] + logp
        flat = total.ravel()
        k = min(width, flat.size)
        kth = np.partition(flat, flat.size - k)[flat.size - k]
        idx = np.nonzero(flat >= kth)[0]
        V = logp.shape[1]
        cands = sorted(((float(flat[i]), live[i // V][0] + [int(i % V)]) for i in idx),
                       key=lambda c: (-c[0], c[1]))[:width]
        live = []
        for score, seq in cands:
            if seq[-1] == END_ID:
                done.append(Caption(seq[1:], score, True))
                width -= 1
            else:
                live.append((seq, score))
        if not live:
            break
    done.extend(Caption(seq[1:], score, False) for seq, score in live)
    return min(done, key=lambda c: (-c.normalized, c.tokens))


def decode(model, feature_maps, beam=BEAM_WIDTH, max_len=MAX_LEN) -> Caption:
    scorer = model_scorer(model, feature_maps)
    return greedy(scorer, max_len) if beam == 0 else beam_search(scorer, beam, max_len)


# -- BLEU ---------------------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c_len, refs):
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def _stats(cand, refs, n_max):
    matches, totals = [], []
    for n in range(1, n_max + 1):
        c = _ngrams(cand, n)
        best = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        matches.append(sum(min(k, best[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, len(cand), _closest_ref_len(len(cand), refs)


def _scores(matches, totals, c_len, r_len, n_max, smooth):
    if c_len == 0:
        return [0.0] * n_max
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    out, log_sum = [], 0.0
    for n in range(n_max):
        m, t = matches[n], totals[n]
        if smooth and m == 0:
            m, t = 1, t + 1
        if m == 0 or t == 0:
            log_sum = -math.inf
        else:
            log_sum += math.log(m / t)
        out.append(bp * math.exp(log_sum / (n + 1)) if log_sum > -math.inf else 0.0)
    return out


def bleu(candidates, references, n_max=4, smoothing=False):
    """BLEU-1..BLEU-n_max.

    ``candidates`` is a list of token lists; ``references`` a list of lists of
    token lists (at least one per candidate). Without ``smoothing`` this is the
    corpus score (pooled clipped counts, corpus brevity penalty). With
    ``smoothing`` each sentence is scored with add-one on zero n-gram matches
    and the sentence scores are averaged.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references) or any(not r for r in references):
        raise ValueError("need at least one reference per candidate")
    stats = [_stats(list(c), [list(r) for r in refs], n_max) for c, refs in zip(candidates, references)]
    if smoothing:
        per = [_scores(*s, n_max, True) for s in stats]
        return [float(np.mean([p[n] for p in per])) for n in range(n_max)]
    matches = [sum(s[0][n] for s in stats) for n in range(n_max)]
    totals = [sum(s[1][n] for s in stats) for n in range(n_max)]
    return _scores(matches, totals, sum(s[2] for s in stats), sum(s[3] for s in stats), n_max, False)
