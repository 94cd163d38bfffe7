"""Text metrics: tokenization, ROUGE-L, CIDEr / CIDEr-D, and answer accuracy."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

_PUNCT_RE = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces, split on whitespace."""
    return _PUNCT_RE.sub(" ", text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: str, ref: str, beta: float = 1.0) -> float:
    """LCS-based F-measure on ``tokenize``d text; 0 when nothing overlaps."""
    h, r = tokenize(hyp), tokenize(ref)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    b2 = beta * beta
    return (1 + b2) * p * rec / (rec + b2 * p)


def ngram_counts(tokens: Sequence[str], n: int = 4) -> Counter:
    counts: Counter = Counter()
    for k in range(1, n + 1):
        for i in range(len(tokens) - k + 1):
            counts[tuple(tokens[i:i + k])] += 1
    return counts


@dataclass(frozen=True)
class DocumentFrequency:
    """N-gram document frequencies over a reference corpus (one document per item)."""

    counts: Mapping[tuple[str, ...], int]
    num_docs: int

    @classmethod
    def from_references(cls, references: Iterable[Sequence[str]], n: int = 4) -> DocumentFrequency:
        df: Counter = Counter()
        num = 0
        for refs in references:
            seen: set = set()
            for ref in refs:
                seen.update(ngram_counts(tokenize(ref), n))
            df.update(seen)
            num += 1
        return cls(dict(df), num)


def _tfidf(counts: Counter, df: DocumentFrequency, n: int) -> tuple[list[dict], list[float], int]:
    log_docs = math.log(float(df.num_docs)) if df.num_docs > 0 else 0.0
    vec: list[dict] = [{} for _ in range(n)]
    norm = [0.0] * n
    length = 0
    for gram, tf in counts.items():
        k = len(gram) - 1
        w = tf * (log_docs - math.log(max(1.0, float(df.counts.get(gram, 0)))))
        vec[k][gram] = w
        norm[k] += w * w
        if k == 0:
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


def cider_scores(
    pairs: Sequence[tuple[str, Sequence[str]]],
    variant: str = "cider",
    n: int = 4,
    sigma: float = 6.0,
    doc_freq: DocumentFrequency | None = None,
) -> np.ndarray:
    """Per-pair CIDEr (raw scale, 10 for a perfect match).

    TF-IDF n-gram vectors (n = 1..4) are compared by cosine per order,
    averaged over orders and references, and multiplied by 10. Document
    frequencies come from the references of ``pairs`` unless ``doc_freq`` is
    given. ``variant="cider-d"`` adds count clipping and the Gaussian length
    penalty. A corpus of one pair has zero IDF everywhere and scores 0.
    """
    if variant not in ("cider", "cider-d"):
        raise ValueError(f"unknown CIDEr variant {variant!r}")
    if not pairs:
        raise ValueError("CIDEr needs at least one pair")
    for _, refs in pairs:
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
    df = doc_freq or DocumentFrequency.from_references((refs for _, refs in pairs), n)
    clip = variant == "cider-d"
    scores = np.zeros(len(pairs))
    for idx, (hyp, refs) in enumerate(pairs):
        vh, nh, lh = _tfidf(ngram_counts(tokenize(hyp), n), df, n)
        total = np.zeros(n)
        for ref in refs:
            vr, nr, lr = _tfidf(ngram_counts(tokenize(ref), n), df, n)
            for k in range(n):
                dot = 0.0
                for gram, w in vh[k].items():
                    r = vr[k].get(gram, 0.0)
                    dot += (min(w, r) if clip else w) * r
                if nh[k] != 0 and nr[k] != 0:
                    dot /= nh[k] * nr[k]
                if clip:
                    dot *= math.exp(-((lh - lr) ** 2) / (2 * sigma * sigma))
                total[k] += dot
        scores[idx] = 10.0 * float(np.mean(total)) / len(refs)
    return scores


def cider(pairs: Sequence[tuple[str, Sequence[str]]], **kw) -> float:
    return float(np.mean(cider_scores(pairs, **kw)))
