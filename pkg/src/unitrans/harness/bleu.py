"""4-gram BLEU over token sequences.

Corpus scores are unsmoothed. Sentence scores add one to the matched and
total counts of every order n >= 2, so short hypotheses stay informative.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import MetricError

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list
    totals: list
    sentence_bleu: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"bleu": self.bleu, "precisions": self.precisions,
                "brevity_penalty": self.brevity_penalty, "hyp_len": self.hyp_len,
                "ref_len": self.ref_len, "matches": self.matches, "totals": self.totals,
                "sentence_bleu": self.sentence_bleu}


def _tokens(seq) -> tuple:
    if isinstance(seq, np.ndarray):
        seq = seq.tolist()
    return tuple(seq)


def _is_multi(entry) -> bool:
    seq = list(entry) if not isinstance(entry, np.ndarray) else entry.tolist()
    return bool(seq) and isinstance(seq[0], (list, tuple, np.ndarray))


def _ngrams(seq: tuple, n: int) -> Counter:
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def _closest_ref_len(refs, hyp_len: int) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _stats(refs, hyp):
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h = _ngrams(hyp, n)
        best = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        matches.append(sum(min(c, best[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals, _closest_ref_len(refs, len(hyp))


def _score(matches, totals, hyp_len, ref_len, smooth: bool):
    precisions = []
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        if smooth and n >= 2:
            precisions.append((m + 1) / (t + 1))
        else:
            precisions.append(m / t if t > 0 else 0.0)
    if hyp_len == 0 or min(precisions) <= 0:
        return 0.0, precisions, 0.0 if hyp_len == 0 else _bp(hyp_len, ref_len)
    bp = _bp(hyp_len, ref_len)
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER), precisions, bp


def _bp(hyp_len, ref_len) -> float:
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def _normalize_refs(refs, n):
    if len(refs) != n:
        raise MetricError(f"{len(refs)} reference entries for {n} hypotheses")
    if n == 0:
        raise MetricError("BLEU needs at least one sentence")
    out = []
    for entry in refs:
        group = [_tokens(r) for r in entry] if _is_multi(entry) else [_tokens(entry)]
        if not group:
            raise MetricError("empty reference set")
        out.append(group)
    return out


def sentence_bleu(refs, hyp) -> float:
    """Add-one smoothed (orders >= 2) BLEU of one hypothesis; ``refs`` is one or more sequences."""
    group = [_tokens(r) for r in refs] if _is_multi(refs) else [_tokens(refs)]
    m, t, r = _stats(group, _tokens(hyp))
    return _score(m, t, len(_tokens(hyp)), r, smooth=True)[0]


def corpus_bleu(refs, hyps) -> BleuReport:
    """Corpus BLEU. Each ``refs`` entry is a token sequence or a list of alternatives."""
    hyps = [_tokens(h) for h in hyps]
    groups = _normalize_refs(list(refs), len(hyps))
    M = [0] * MAX_ORDER
    Tt = [0] * MAX_ORDER
    hl = rl = 0
    sent = []
    for g, h in zip(groups, hyps):
        m, t, r = _stats(g, h)
        M = [a + b for a, b in zip(M, m)]
        Tt = [a + b for a, b in zip(Tt, t)]
        hl += len(h)
        rl += r
        sent.append(_score(m, t, len(h), r, smooth=True)[0])
    bleu, prec, bp = _score(M, Tt, hl, rl, smooth=False)
    return BleuReport(bleu, prec, bp, hl, rl, M, Tt, sent)


def token_accuracy(refs, hyps) -> float:
    """Percent position-wise matches, best over alternative references; length mismatch counts as error."""
    hyps = [_tokens(h) for h in hyps]
    groups = _normalize_refs(list(refs), len(hyps))
    hit = total = 0
    for g, h in zip(groups, hyps):
        best = max(((sum(a == b for a, b in zip(r, h)), max(len(r), len(h))) for r in g),
                   key=lambda x: x[0] / max(x[1], 1))
        hit += best[0]
        total += best[1]
    return 100.0 * hit / max(total, 1)
