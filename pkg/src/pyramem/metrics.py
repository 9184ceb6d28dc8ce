"""Answer-quality metrics and the token cost estimate.

Tokenization is shared by every metric: text is lowercased, maximal
alphanumeric runs become tokens (words), and every other non-whitespace
character counts as a symbol.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import groupby
from typing import Iterable, Sequence

ROUGE_L_BETA = 1.2
METRIC_NAMES = ("f1", "bleu1", "rouge_l", "rouge_2", "meteor")


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. every reference empty)."""


@dataclass(frozen=True)
class TokenizedText:
    tokens: tuple[str, ...]
    word_count: int
    symbol_count: int


def tokenize(text: str) -> TokenizedText:
    tokens: list[str] = []
    symbols = 0
    for is_alnum, run in groupby(text.lower(), key=str.isalnum):
        chunk = "".join(run)
        if is_alnum:
            tokens.append(chunk)
        else:
            symbols += sum(1 for ch in chunk if not ch.isspace())
    return TokenizedText(tuple(tokens), len(tokens), symbols)


def estimate_tokens(text: str) -> float:
    """Estimated LLM tokens: 1.1 per word plus 0.35 per symbol."""
    t = tokenize(text)
    return 1.1 * t.word_count + 0.35 * t.symbol_count


def _tokens(text: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(text, str):
        return tokenize(text).tokens
    return tuple(text)


def _references(references: str | Iterable[str]) -> list[tuple[str, ...]]:
    if isinstance(references, str):
        references = [references]
    refs = [_tokens(r) for r in references]
    if not refs:
        raise MetricError("at least one reference is required")
    return refs


def _f1_single(pred: set[str], ref: set[str]) -> float:
    common = len(pred & ref)
    if common == 0:
        return 0.0
    p = common / len(pred)
    r = common / len(ref)
    return 2 * p * r / (p + r)


def f1(prediction: str, references: str | Iterable[str]) -> float:
    """Token-set F1, maximised over references."""
    refs = _references(references)
    if all(not r for r in refs):
        raise MetricError("all references are empty")
    pred = set(_tokens(prediction))
    if not pred:
        return 0.0
    return max(_f1_single(pred, set(r)) for r in refs if r)


def bleu1(prediction: str, references: str | Iterable[str]) -> float:
    """Clipped unigram precision times the brevity penalty.

    The effective reference length is the reference length closest to the
    candidate length, ties going to the shorter reference.
    """
    refs = _references(references)
    cand = _tokens(prediction)
    c = len(cand)
    if c == 0:
        return 0.0
    max_ref: Counter[str] = Counter()
    for ref in refs:
        for tok, n in Counter(ref).items():
            if n > max_ref[tok]:
                max_ref[tok] = n
    clipped = sum(min(n, max_ref[tok]) for tok, n in Counter(cand).items())
    p1 = clipped / c
    r = min((len(ref) for ref in refs), key=lambda n: (abs(n - c), n))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * p1


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


def rouge_l(prediction: str, reference: str, beta: float = ROUGE_L_BETA) -> float:
    ref = _tokens(reference)
    if not ref:
        raise MetricError("reference is empty")
    pred = _tokens(prediction)
    if not pred:
        return 0.0
    lcs = lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    r_l = lcs / len(ref)
    p_l = lcs / len(pred)
    b2 = beta * beta
    return (1 + b2) * r_l * p_l / (r_l + b2 * p_l)


def rouge_2(prediction: str, reference: str) -> float:
    """Bigram recall against the reference; 0 for references under 2 tokens."""
    ref = _tokens(reference)
    if len(ref) < 2:
        return 0.0
    pred = _tokens(prediction)
    ref_bigrams = Counter(zip(ref, ref[1:]))
    cand_bigrams = Counter(zip(pred, pred[1:]))
    overlap = sum(min(n, cand_bigrams[b]) for b, n in ref_bigrams.items())
    return overlap / sum(ref_bigrams.values())


# Above this many maximum-match alignments the exact chunk search is replaced
# by a greedy left-to-right alignment.
_EXACT_ALIGNMENT_BUDGET = 20_000


def _min_chunks_exact(pred: tuple[str, ...], ref: tuple[str, ...]) -> int:
    """Fewest chunks over all alignments that match the maximum unigram count.

    A chunk is a run of matches adjacent in both texts; minimising chunks
    is maximising the number of (i, j) -> (i+1, j+1) continuation links.
    """
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    quota = Counter(pred) & Counter(ref)
    m = sum(quota.values())

    remaining_pred: list[Counter[str]] = [Counter() for _ in range(len(pred) + 1)]
    for i in range(len(pred) - 1, -1, -1):
        remaining_pred[i] = remaining_pred[i + 1] + Counter([pred[i]])

    @lru_cache(maxsize=None)
    def best(i: int, used: frozenset[int], prev: int) -> tuple[int, int]:
        # Returns (matches, links) for pred[i:], maximised lexicographically.
        if i == len(pred):
            return (0, 0)
        tok = pred[i]
        options: list[tuple[int, int]] = []
        free = [j for j in positions.get(tok, ()) if j not in used]
        # Skipping a token is only allowed if the remaining copies of it can
        # still fill every free slot; otherwise the match count drops.
        if len(free) < remaining_pred[i][tok] or not free:
            skip = best(i + 1, used, -2)
            options.append(skip)
        for j in free:
            sub = best(i + 1, used | {j}, j)
            options.append((sub[0] + 1, sub[1] + (1 if j == prev + 1 else 0)))
        return max(options)

    matches, links = best(0, frozenset(), -2)
    best.cache_clear()
    assert matches == m
    return m - links


def _min_chunks_greedy(pred: tuple[str, ...], ref: tuple[str, ...]) -> int:
    used: set[int] = set()
    aligned: list[tuple[int, int]] = []
    prev = -2
    for i, tok in enumerate(pred):
        free = [j for j, r in enumerate(ref) if r == tok and j not in used]
        if not free:
            prev = -2
            continue
        j = prev + 1 if prev + 1 in free else free[0]
        used.add(j)
        aligned.append((i, j))
        prev = j
    chunks = 0
    for k, (i, j) in enumerate(aligned):
        if k == 0 or not (i == aligned[k - 1][0] + 1 and j == aligned[k - 1][1] + 1):
            chunks += 1
    return chunks


def _alignment_count(pred: tuple[str, ...], ref: tuple[str, ...]) -> int:
    """Number of distinct maximum-match alignments."""
    ref_counts = Counter(ref)
    size = 1
    for tok, n in Counter(pred).items():
        k = ref_counts[tok]
        if k:
            size *= math.perm(max(n, k), min(n, k))
    return size


def meteor(prediction: str, reference: str) -> float:
    """Exact-match METEOR: Fmean with recall weight 9 and a cubic chunk penalty."""
    pred = _tokens(prediction)
    ref = _tokens(reference)
    if not pred or not ref:
        return 0.0
    m = sum((Counter(pred) & Counter(ref)).values())
    if m == 0:
        return 0.0
    if _alignment_count(pred, ref) <= _EXACT_ALIGNMENT_BUDGET:
        chunks = _min_chunks_exact(pred, ref)
    else:
        chunks = _min_chunks_greedy(pred, ref)
    p = m / len(pred)
    r = m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1 - penalty)


@dataclass(frozen=True)
class MetricScores:
    f1: float
    bleu1: float
    rouge_l: float
    rouge_2: float
    meteor: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def zero(cls) -> MetricScores:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def score(prediction: str, references: Sequence[str]) -> MetricScores:
    """All five metrics; single-reference metrics take the best reference."""
    refs = [r for r in references if _tokens(r)]
    if not refs:
        raise MetricError("all references are empty")
    return MetricScores(
        f1=f1(prediction, refs),
        bleu1=bleu1(prediction, refs),
        rouge_l=max(rouge_l(prediction, r) for r in refs),
        rouge_2=max(rouge_2(prediction, r) for r in refs),
        meteor=max(meteor(prediction, r) for r in refs),
    )


@dataclass
class CategoryRow:
    category: str
    count: int
    means: dict[str, float]


def aggregate(
    per_question: Sequence[tuple[str, MetricScores]],
    categories: Sequence[str] | None = None,
) -> tuple[list[CategoryRow], dict[str, float]]:
    """Per-category means and the question-count-weighted overall mean.

    Categories with no questions are reported with ``count=0`` and carry no
    weight.
    """
    grouped: dict[str, list[MetricScores]] = {}
    for cat, s in per_question:
        grouped.setdefault(cat, []).append(s)
    order = list(categories) if categories else sorted(grouped)
    for cat in grouped:
        if cat not in order:
            order.append(cat)
    rows = []
    for cat in order:
        scores = grouped.get(cat, [])
        means = {
            name: (math.fsum(getattr(s, name) for s in scores) / len(scores) if scores else 0.0)
            for name in METRIC_NAMES
        }
        rows.append(CategoryRow(cat, len(scores), means))
    total = sum(r.count for r in rows)
    overall = {
        name: (math.fsum(r.means[name] * r.count for r in rows) / total if total else 0.0)
        for name in METRIC_NAMES
    }
    return rows, overall
