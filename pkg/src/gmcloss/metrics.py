"""CIDEr, BLEU@N and ROUGE-L for tokenized captions.

CIDEr here is the classic consensus score: per-n TF-IDF vectors with
document frequencies counted per video, cosine similarity against every
reference, averaged over references and over n = 1..4, times 10. There is
no length penalty and no count clipping (that would be CIDEr-D).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import DfTable, ngrams

ROUGE_BETA2 = 1.2
CIDER_SCALE = 10.0

Tokens = Sequence[str]


@dataclass
class TfIdfVector:
    levels: list[dict[tuple[str, ...], float]]
    norms: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.norms:
            self.norms = [math.sqrt(sum(w * w for w in lvl.values())) for lvl in self.levels]


@dataclass
class MetricReport:
    bleu: dict[int, float]
    rouge_l: float
    cider: float

    def to_json(self) -> dict:
        out = {f"bleu_{n}": v for n, v in sorted(self.bleu.items())}
        out["rouge_l"] = self.rouge_l
        out["cider"] = self.cider
        return out


def tfidf(tokens: Tokens, df: DfTable) -> TfIdfVector:
    if df.num_videos < 1:
        raise ValueError("document frequency table is empty")
    log_n = math.log(df.num_videos)
    levels = []
    for n in range(1, df.n_max + 1):
        counts = ngrams(list(tokens), n)
        total = sum(counts.values())
        level = {}
        for gram, c in counts.items():
            # unseen n-grams behave as if present in a single video
            idf = log_n - math.log(max(df[(n, gram)], 1))
            w = c / total * idf
            if w > 0.0:
                level[gram] = w
        levels.append(level)
    return TfIdfVector(levels)


def _cos(a: dict, na: float, b: dict, nb: float) -> float:
    if na == 0.0 or nb == 0.0:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    dot = sum(w * b[g] for g, w in a.items() if g in b)
    return dot / (na * nb)


def cider_vectors(cand: TfIdfVector, refs: Sequence[TfIdfVector]) -> float:
    """CIDEr from precomputed TF-IDF vectors."""
    if not refs:
        raise ValueError("CIDEr needs at least one reference")
    n_levels = len(cand.levels)
    total = 0.0
    for n in range(n_levels):
        ca, na = cand.levels[n], cand.norms[n]
        s = sum(_cos(ca, na, r.levels[n], r.norms[n]) for r in refs)
        total += s / len(refs)
    return CIDER_SCALE * total / n_levels


def cider(candidate: Tokens, references: Sequence[Tokens], df: DfTable) -> float:
    if not references:
        raise ValueError("CIDEr needs at least one reference")
    return cider_vectors(tfidf(candidate, df), [tfidf(r, df) for r in references])


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> dict[int, float]:
    """Sentence BLEU@1..max_n with clipped precisions and the closest-length brevity penalty.

    Ties between equally close reference lengths resolve to the shorter one.
    """
    if not references:
        raise ValueError("BLEU needs at least one reference")
    c_len = len(candidate)
    if c_len == 0:
        return {n: 0.0 for n in range(1, max_n + 1)}
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)

    log_p = []
    for n in range(1, max_n + 1):
        cand = ngrams(list(candidate), n)
        max_ref: Counter = Counter()
        for r in references:
            for g, c in ngrams(list(r), n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        log_p.append(math.log(clipped / total) if clipped else -math.inf)

    out = {}
    for n in range(1, max_n + 1):
        head = log_p[:n]
        out[n] = 0.0 if -math.inf in head else bp * math.exp(sum(head) / n)
    return out


def lcs_length(a: Tokens, b: Tokens) -> int:
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta2: float = ROUGE_BETA2) -> float:
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta2) * p * r / (r + beta2 * p)
        best = max(best, f)
    return best


def evaluate_caption(candidate: Tokens, references: Sequence[Tokens], df: DfTable) -> MetricReport:
    return MetricReport(
        bleu=bleu(candidate, references, 4),
        rouge_l=rouge_l(candidate, references),
        cider=cider(candidate, references, df),
    )
