"""Reference caption metrics: corpus BLEU-1..4, ROUGE-L, and CIDEr.

All metrics consume pre-tokenized sentences (lists of string tokens).
Candidates and references are aligned lists; each item may carry several
references. These functions are pure and order-invariant over items.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

BLEU_EPS = 1e-9  # substituted for a zero modified precision
ROUGE_BETA_SQ = 1.2  # recall weighting of the LCS F-measure
CIDER_MAX_N = 4

Tokens = list[str]


@dataclass(frozen=True)
class MetricReport:
    b1: float
    b2: float
    b3: float
    b4: float
    rouge_l: float
    cider: float
    corpus_size: int

    def as_dict(self) -> dict:
        return {
            "B1": self.b1,
            "B2": self.b2,
            "B3": self.b3,
            "B4": self.b4,
            "ROUGE-L": self.rouge_l,
            "CIDEr": self.cider,
            "corpus_size": self.corpus_size,
        }


def _check_corpus(candidates: list[Tokens], references: list[list[Tokens]]) -> None:
    if not candidates:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference length mismatch: {len(candidates)} vs {len(references)}"
        )
    if any(not refs for refs in references):
        raise ValueError("every item needs at least one reference")


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[Tokens], references: list[list[Tokens]], n: int = 4) -> float:
    """Corpus-level BLEU-n: clipped modified precisions with uniform weights
    over 1..n, and the brevity penalty exp(1 - r/c) when c < r.

    Effective reference length per item is the closest to the candidate
    length (shorter wins ties). Zero precisions are replaced by BLEU_EPS.
    """
    _check_corpus(candidates, references)
    if n not in (1, 2, 3, 4):
        raise ValueError(f"n must be in 1..4, got {n}")

    matched = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            max_ref = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], c)
            total[k - 1] += max(0, len(cand) - k + 1)
            matched[k - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())

    log_sum = 0.0
    for k in range(n):
        if total[k] == 0:
            precision = BLEU_EPS
        else:
            precision = matched[k] / total[k]
            if precision == 0.0:
                precision = BLEU_EPS
        log_sum += math.log(precision) / n
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum)


def _lcs_f(cand: Tokens, ref: Tokens) -> float:
    if not cand or not ref:
        return 0.0
    prev = [0] * (len(ref) + 1)
    for i in range(1, len(cand) + 1):
        cur = [0] * (len(ref) + 1)
        for j in range(1, len(ref) + 1):
            if cand[i - 1] == ref[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[len(ref)]
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)


def rouge_l(candidates: list[Tokens], references: list[list[Tokens]]) -> float:
    """Mean over items of the best (over references) LCS F-measure."""
    _check_corpus(candidates, references)
    return sum(
        max(_lcs_f(cand, ref) for ref in refs)
        for cand, refs in zip(candidates, references)
    ) / len(candidates)


def cider(candidates: list[Tokens], references: list[list[Tokens]]) -> float:
    """Mean over items of 10 x the average (n = 1..4) TF-IDF n-gram cosine.

    Document frequency counts the items whose reference set contains the
    n-gram; idf = log(N) - log(max(1, df)). The per-item score averages the
    cosine over that item's references.
    """
    _check_corpus(candidates, references)
    n_items = len(candidates)

    df: Counter = Counter()
    for refs in references:
        grams: set = set()
        for ref in refs:
            for n in range(1, CIDER_MAX_N + 1):
                grams.update(_ngrams(ref, n))
        df.update(grams)
    log_n = math.log(n_items)

    def vectors(tokens: Tokens) -> list[dict]:
        out = []
        for n in range(1, CIDER_MAX_N + 1):
            out.append(
                {
                    g: tf * (log_n - math.log(max(1, df[g])))
                    for g, tf in _ngrams(tokens, n).items()
                }
            )
        return out

    def cosine(u: dict, v: dict) -> float:
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return sum(x * v[g] for g, x in u.items() if g in v) / (nu * nv)

    score = 0.0
    for cand, refs in zip(candidates, references):
        cand_vecs = vectors(cand)
        per_ref = 0.0
        for ref in refs:
            ref_vecs = vectors(ref)
            per_ref += sum(cosine(cu, rv) for cu, rv in zip(cand_vecs, ref_vecs)) / CIDER_MAX_N
        score += per_ref / len(refs)
    return 10.0 * score / n_items


def evaluate(candidates: list[Tokens], references: list[list[Tokens]]) -> MetricReport:
    """Full MetricReport over an aligned candidate/reference corpus."""
    return MetricReport(
        b1=bleu(candidates, references, 1),
        b2=bleu(candidates, references, 2),
        b3=bleu(candidates, references, 3),
        b4=bleu(candidates, references, 4),
        rouge_l=rouge_l(candidates, references),
        cider=cider(candidates, references),
        corpus_size=len(candidates),
    )
