"""Corpus caption metrics over tokenised sentences (one reference per candidate)."""

from __future__ import annotations

import math
from collections import Counter
from typing import List, Sequence

import numpy as np

from .errors import ContractError

Sentence = Sequence[str]


def _check(candidates, references, minimum: int = 1) -> None:
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if len(candidates) < minimum:
        raise ContractError(f"metric needs at least {minimum} examples")


def ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: Sequence[Sentence], references: Sequence[Sentence], n: int = 4) -> float:
    """Corpus BLEU with clipped counts, uniform weights over orders 1..n and brevity penalty.

    Any order without a clipped match scores 0 (no smoothing).
    """
    _check(candidates, references)
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    matched = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            cc, rc = ngrams(cand, k), ngrams(ref, k)
            matched[k - 1] += sum(min(c, rc[g]) for g, c in cc.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sentence, b: Sentence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand: Sentence, ref: Sentence, beta: float = 1.2) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates: Sequence[Sentence], references: Sequence[Sentence], beta: float = 1.2) -> float:
    """Mean sentence-level LCS F-measure; ``beta`` > 1 favours recall."""
    _check(candidates, references)
    return float(np.mean([rouge_l_sentence(c, r, beta) for c, r in zip(candidates, references)]))


def cider(candidates: Sequence[Sentence], references: Sequence[Sentence], n: int = 4,
          sigma: float = 6.0) -> float:
    """CIDEr-D: clipped TF-IDF cosine per order with a Gaussian length penalty, x10.

    Document frequencies come from the references of this corpus.
    """
    _check(candidates, references, minimum=2)
    N = len(references)
    ref_grams = [[ngrams(r, k) for k in range(1, n + 1)] for r in references]
    df: Counter = Counter()
    for per_order in ref_grams:
        for grams in per_order:
            df.update(grams.keys())
    log_n = math.log(float(N))

    def vec(grams: Counter):
        v = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in grams.items()}
        return v, math.sqrt(sum(x * x for x in v.values()))

    scores: List[float] = []
    for cand, ref, rg in zip(candidates, references, ref_grams):
        delta = len(cand) - len(ref)
        penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
        per_n = []
        for k in range(n):
            vc, nc = vec(ngrams(cand, k + 1))
            vr, nr = vec(rg[k])
            dot = sum(min(x, vr[g]) * vr[g] for g, x in vc.items() if g in vr)
            per_n.append(dot / (nc * nr) * penalty if nc and nr else 0.0)
        scores.append(10.0 * sum(per_n) / n)
    return float(np.mean(scores))


def metric_report(candidates: Sequence[Sentence], references: Sequence[Sentence]) -> dict:
    """All metrics for one corpus; CIDEr is left out (None) below two examples."""
    _check(candidates, references)
    rep = {f"B@{k}": bleu_n(candidates, references, k) for k in range(1, 5)}
    rep["ROUGE-L"] = rouge_l(candidates, references)
    rep["CIDEr"] = cider(candidates, references) if len(candidates) >= 2 else None
    rep["count"] = len(candidates)
    return rep
