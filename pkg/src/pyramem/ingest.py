"""Keyword extraction, vocabulary matching and indexing of new memories."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .llm import ChatRequest, Gateway, LLMError, Usage, parse_structured
from .prompts import PromptSet
from .store import MemoryBank, MemoryRecord, ValidationError, normalize_keyword

logger = logging.getLogger(__name__)

MAX_KEYWORDS_PER_MEMORY = 8
MATCH_CANDIDATES = 200


@dataclass
class ExtractionOutcome:
    raw_keywords: list[str]
    matched: list[str] = field(default_factory=list)
    novel: list[str] = field(default_factory=list)

    @property
    def final(self) -> list[str]:
        return list(dict.fromkeys(self.matched + self.novel))


def _dedupe_normalized(keywords: Iterable[str]) -> list[str]:
    out: list[str] = []
    for kw in keywords:
        norm = normalize_keyword(kw)
        if norm and norm not in out:
            out.append(norm)
    return out


def extract_keywords(
    record: MemoryRecord,
    gateway: Gateway,
    prompts: PromptSet,
    max_keywords: int = MAX_KEYWORDS_PER_MEMORY,
) -> list[str]:
    system, user = prompts.extract.render(
        question=record.question,
        answer=record.answer,
        session=record.session or "unknown",
        max_keywords=max_keywords,
    )
    resp = gateway.complete(ChatRequest(system, user, "extract"))
    keywords = _dedupe_normalized(parse_structured(resp.text, "keyword_list"))
    if not keywords:
        logger.warning("memory %s: no keywords extracted; it stays unindexed", record.id)
    return keywords[:max_keywords]


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest_vocabulary(
    keywords: Sequence[str], vocabulary: Sequence[str], limit: int = MATCH_CANDIDATES
) -> list[str]:
    """Vocabulary entries closest to any of ``keywords`` by normalized edit distance."""
    if len(vocabulary) <= limit:
        return list(vocabulary)

    def distance(entry: str) -> float:
        return min(levenshtein(entry, kw) / max(len(entry), len(kw)) for kw in keywords)

    ranked = sorted(range(len(vocabulary)), key=lambda i: (distance(vocabulary[i]), i))
    return [vocabulary[i] for i in sorted(ranked[:limit])]


def match_vocabulary(
    raw: Sequence[str],
    vocabulary: Sequence[str],
    gateway: Gateway,
    prompts: PromptSet,
) -> ExtractionOutcome:
    """Resolve raw keywords against the vocabulary.

    Exact normalized hits are resolved locally. The rest go to the matching
    prompt in one call; a keyword the model maps to nothing (or only to
    entries outside the vocabulary) becomes novel.
    """
    outcome = ExtractionOutcome(raw_keywords=list(raw))
    if not raw:
        return outcome
    known = set(vocabulary)
    unmatched: list[str] = []
    for kw in raw:
        if kw in known:
            if kw not in outcome.matched:
                outcome.matched.append(kw)
        else:
            unmatched.append(kw)
    if not unmatched:
        return outcome
    if not vocabulary:
        outcome.novel.extend(unmatched)
        return outcome

    candidates = nearest_vocabulary(unmatched, vocabulary)
    system, user = prompts.match.render(
        keywords="\n".join(f"- {kw}" for kw in unmatched),
        vocabulary="\n".join(f"- {v}" for v in candidates),
    )
    resp = gateway.complete(ChatRequest(system, user, "match"))
    raw_map = parse_structured(resp.text, "match_result")
    mapping = {normalize_keyword(k): v for k, v in raw_map.items()}
    for kw in unmatched:
        hits = []
        for target in mapping.get(kw, []):
            norm = normalize_keyword(target)
            if norm in known:
                hits.append(norm)
            else:
                logger.warning("match for %r names %r, which is not in the vocabulary", kw, target)
        if hits:
            for h in hits:
                if h not in outcome.matched:
                    outcome.matched.append(h)
        elif kw not in outcome.novel:
            outcome.novel.append(kw)
    return outcome


@dataclass
class IngestReport:
    records_added: list[int] = field(default_factory=list)
    indexed: list[int] = field(default_factory=list)
    unindexed: list[int] = field(default_factory=list)
    new_keywords: list[str] = field(default_factory=list)
    postings_updated: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)
    usage: Usage = field(default_factory=Usage)
    calls_per_record: list[int] = field(default_factory=list)
    outcomes: dict[int, ExtractionOutcome] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "records_added": len(self.records_added),
            "indexed": len(self.indexed),
            "unindexed": self.unindexed,
            "new_keywords": len(self.new_keywords),
            "postings_updated": self.postings_updated,
            "errors": [{"index": i, "error": e} for i, e in self.errors],
            "usage": self.usage.to_dict(),
        }


def _coerce_input(item: Any) -> tuple[str, str, str | None]:
    if isinstance(item, Mapping):
        return item.get("question", ""), item.get("answer", ""), item.get("session")
    question, answer, *rest = item
    return question, answer, rest[0] if rest else None


def ingest(
    items: Iterable[Any],
    bank: MemoryBank,
    gateway: Gateway,
    prompts: PromptSet | None = None,
    max_keywords: int = MAX_KEYWORDS_PER_MEMORY,
) -> IngestReport:
    """Add and index each input in order.

    Inputs are mappings with ``question``/``answer``/``session`` or
    ``(question, answer[, session])`` tuples. A failing input is reported in
    ``errors`` and does not stop the batch; records are only stored once
    their keywords are resolved, so a failure leaves the bank untouched.
    """
    prompts = prompts or PromptSet.load()
    report = IngestReport()
    start = gateway.usage.copy()
    for index, item in enumerate(items):
        before = gateway.usage.calls
        try:
            question, answer, session = _coerce_input(item)
            if not isinstance(question, str) or not question.strip():
                raise ValidationError("question must be non-empty")
            if not isinstance(answer, str) or not answer.strip():
                raise ValidationError("answer must be non-empty")
            draft = MemoryRecord(bank.next_id, question, answer, session)
            raw = extract_keywords(draft, gateway, prompts, max_keywords)
            outcome = match_vocabulary(raw, bank.vocabulary, gateway, prompts)
        except (LLMError, ValidationError, ValueError, TypeError) as exc:
            logger.warning("input %d failed: %s", index, exc)
            report.errors.append((index, f"{type(exc).__name__}: {exc}"))
            report.calls_per_record.append(gateway.usage.calls - before)
            continue
        memory_id = bank.add_record(question, answer, session)
        report.records_added.append(memory_id)
        report.outcomes[memory_id] = outcome
        if outcome.final:
            new, updated = bank.register_keywords(memory_id, outcome.final)
            report.new_keywords.extend(new)
            report.postings_updated += updated
            report.indexed.append(memory_id)
        else:
            report.unindexed.append(memory_id)
        report.calls_per_record.append(gateway.usage.calls - before)
    report.usage = gateway.usage - start
    return report
