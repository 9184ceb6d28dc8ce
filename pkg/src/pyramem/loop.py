"""Per-query reflective retrieval over the keyword pyramid.

Each round takes the next keyword group, drops memories already shown in
earlier rounds, and asks the main model for an answer, a sufficiency flag
and the ids of the critical memories. Rounds stop when the answer is
accepted, the round budget is spent, or the pyramid is exhausted; the last
answer is then rewritten using only the final critical memories.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, Sequence

from .llm import ChatRequest, Gateway, LLMError, ParseError, Usage, parse_structured
from .prompts import PromptSet
from .pyramid import (
    DEFAULT_DEPTH,
    MAX_DEPTH,
    KeywordPyramid,
    PyramidUnavailable,
    build_pyramid,
    next_group,
    select_query_keywords,
)
from .store import MemoryBank, MemoryRecord

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 4
StopReason = Literal["accepted", "max_rounds", "pyramid_exhausted", "no_keywords"]

_REASK = (
    "\n\nYour previous reply could not be parsed ({error}). "
    'Reply with only the JSON object {{"answer": ..., "sufficient": ..., "critical_ids": [...]}}.'
)


@dataclass(frozen=True)
class LoopConfig:
    depth_cap: int = DEFAULT_DEPTH
    max_rounds: int = DEFAULT_MAX_ROUNDS

    def __post_init__(self) -> None:
        if not 1 <= self.depth_cap <= MAX_DEPTH:
            raise ValueError(f"depth_cap must be in 1..{MAX_DEPTH}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class RoundRecord:
    index: int
    group: tuple[str, ...]
    retrieved: int
    fresh_ids: list[int]
    answer: str | None
    sufficient: bool
    critical_ids: list[int]
    usage: Usage = field(default_factory=Usage)
    parse_failed: bool = False

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        return {
            "round": self.index,
            "group": list(self.group),
            "retrieved": self.retrieved,
            "fresh": len(self.fresh_ids),
            "fresh_ids": self.fresh_ids,
            "answer": self.answer,
            "sufficient": self.sufficient,
            "critical_ids": self.critical_ids,
            "parse_failed": self.parse_failed,
            "usage": self.usage.to_dict(include_timing),
        }


@dataclass
class QueryTrace:
    query: str
    query_keywords: list[str] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)
    skipped_groups: list[tuple[str, ...]] = field(default_factory=list)
    final_answer: str = ""
    rewritten_answer: str = ""
    critical_ids: list[int] = field(default_factory=list)
    stop_reason: StopReason = "pyramid_exhausted"
    aux_usage: Usage = field(default_factory=Usage)
    rewrite_usage: Usage = field(default_factory=Usage)
    warnings: list[str] = field(default_factory=list)

    @property
    def main_usage(self) -> Usage:
        total = Usage()
        for r in self.rounds:
            total += r.usage
        total += self.rewrite_usage
        return total

    @property
    def shown_ids(self) -> list[int]:
        return [mid for r in self.rounds for mid in r.fresh_ids]

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        return {
            "query": self.query,
            "query_keywords": self.query_keywords,
            "rounds": [r.to_dict(include_timing) for r in self.rounds],
            "skipped_groups": [list(g) for g in self.skipped_groups],
            "final_answer": self.final_answer,
            "rewritten_answer": self.rewritten_answer,
            "critical_ids": self.critical_ids,
            "stop_reason": self.stop_reason,
            "main_usage": self.main_usage.to_dict(include_timing),
            "aux_usage": self.aux_usage.to_dict(include_timing),
            "warnings": self.warnings,
        }

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, ensure_ascii=False)


def filter_new(current: Iterable[int], seen: set[int]) -> list[int]:
    """Memories of ``current`` not in ``seen``; ``seen`` then absorbs all of ``current``."""
    current = list(current)
    fresh = [mid for mid in current if mid not in seen]
    seen.update(current)
    return fresh


def _render_block(records: Sequence[MemoryRecord]) -> str:
    return "\n".join(r.render() for r in records) if records else "none"


def assemble_input(
    query: str,
    prev_answer: str | None,
    critical: Sequence[MemoryRecord],
    fresh: Sequence[MemoryRecord],
    prompts: PromptSet,
) -> tuple[str, str]:
    return prompts.answer.render(
        question=query,
        previous_answer=prev_answer if prev_answer else "none",
        critical=_render_block(critical),
        fresh=_render_block(fresh),
    )


@dataclass(frozen=True)
class RoundOutcome:
    answer: str | None
    sufficient: bool
    critical_ids: tuple[int, ...]
    parse_failed: bool = False


def answer_round(
    system: str,
    user: str,
    gateway: Gateway,
    shown_ids: Iterable[int],
    prev_critical: Sequence[int] = (),
    usage: Usage | None = None,
    warnings: list[str] | None = None,
) -> RoundOutcome:
    """One answer/assessment call, with a single re-ask on malformed output.

    Critical ids not shown in this prompt are dropped. If the re-ask also
    fails, the round counts as not sufficient and keeps ``prev_critical``.
    """
    shown = set(shown_ids)
    warnings = warnings if warnings is not None else []
    prompt = user
    for attempt in range(2):
        resp = gateway.complete(ChatRequest(system, prompt, "answer"))
        if usage is not None:
            usage.add(resp)
        try:
            parsed = parse_structured(resp.text, "answer_assessment")
        except ParseError as exc:
            warnings.append(f"unparsable assessment (attempt {attempt + 1}): {exc}")
            prompt = user + _REASK.format(error=str(exc)[:80])
            continue
        kept = tuple(i for i in parsed.critical_ids if i in shown)
        dropped = [i for i in parsed.critical_ids if i not in shown]
        if dropped:
            warnings.append(f"critical ids not shown to the model were dropped: {dropped}")
        return RoundOutcome(parsed.answer, parsed.sufficient, kept)
    return RoundOutcome(None, False, tuple(prev_critical), parse_failed=True)


def rewrite(
    answer: str,
    critical: Sequence[MemoryRecord],
    gateway: Gateway,
    prompts: PromptSet,
    usage: Usage | None = None,
    warnings: list[str] | None = None,
) -> str:
    """Normalize the answer format from the final critical memories only.

    Best effort: any gateway failure returns ``answer`` unchanged.
    """
    if not answer.strip():
        return answer
    system, user = prompts.rewrite.render(answer=answer, critical=_render_block(critical))
    try:
        resp = gateway.complete(ChatRequest(system, user, "rewrite"))
    except LLMError as exc:
        if warnings is not None:
            warnings.append(f"rewrite failed, keeping the draft answer: {exc}")
        logger.warning("rewrite failed: %s", exc)
        return answer
    if usage is not None:
        usage.add(resp)
    text = resp.text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text or answer


def _fallback_memories(bank: MemoryBank, k: int) -> list[int]:
    order = sorted(
        range(len(bank.vocabulary)),
        key=lambda i: (-len(bank.mapping[bank.vocabulary[i]]), i),
    )
    ids: set[int] = set()
    for i in order[:k]:
        ids.update(bank.mapping[bank.vocabulary[i]])
    return sorted(ids)


class QueryFailed(LLMError):
    """A query aborted by a gateway error; ``trace`` holds what was done so far."""

    def __init__(self, trace: QueryTrace, cause: Exception) -> None:
        super().__init__(f"query failed: {cause}")
        self.trace = trace


def run_query(
    query: str,
    bank: MemoryBank,
    main: Gateway,
    aux: Gateway,
    prompts: PromptSet | None = None,
    config: LoopConfig | None = None,
    rewrite_answer: bool = True,
) -> QueryTrace:
    """Answer ``query`` from ``bank``; never mutates the bank.

    With ``max_rounds=1`` this is the one-shot variant: a single answer over
    the first keyword group that has any memories. Gateway errors other
    than malformed output raise :class:`QueryFailed`.
    """
    prompts = prompts or PromptSet.load()
    config = config or LoopConfig()
    trace = QueryTrace(query=query)
    try:
        _drive(trace, bank, main, aux, prompts, config, rewrite_answer)
    except LLMError as exc:
        raise QueryFailed(trace, exc) from exc
    return trace


def _answer_into(
    trace: QueryTrace,
    rec: RoundRecord,
    system: str,
    user: str,
    main: Gateway,
    shown: list[int],
    critical: tuple[int, ...],
) -> RoundOutcome:
    trace.rounds.append(rec)
    out = answer_round(system, user, main, shown, critical, rec.usage, trace.warnings)
    rec.answer, rec.sufficient, rec.parse_failed = out.answer, out.sufficient, out.parse_failed
    rec.critical_ids = list(out.critical_ids)
    return out


def _drive(
    trace: QueryTrace,
    bank: MemoryBank,
    main: Gateway,
    aux: Gateway,
    prompts: PromptSet,
    config: LoopConfig,
    rewrite_answer: bool,
) -> None:
    try:
        q = select_query_keywords(
            trace.query, bank.vocabulary, aux, prompts, config.depth_cap, usage=trace.aux_usage
        )
    except (PyramidUnavailable, ParseError) as exc:
        trace.warnings.append(f"pyramid unavailable: {exc}")
        q = []

    critical: tuple[int, ...] = ()
    answer: str | None = None

    if not q:
        fresh = _fallback_memories(bank, config.depth_cap)
        system, user = assemble_input(trace.query, None, [], [bank.get(i) for i in fresh], prompts)
        rec = RoundRecord(1, (), len(fresh), fresh, None, False, [])
        out = _answer_into(trace, rec, system, user, main, fresh, ())
        answer, critical = out.answer, out.critical_ids
        trace.stop_reason = "no_keywords"
    else:
        trace.query_keywords = list(q)
        pyramid: KeywordPyramid = build_pyramid(q, bank.mapping)
        seen: set[int] = set()
        cursor = 0
        while True:
            step = next_group(pyramid, cursor)
            if step is None:
                trace.stop_reason = "pyramid_exhausted"
                break
            group, cursor = step
            fresh = filter_new(group.memories, seen)
            if not fresh:
                trace.skipped_groups.append(group.keywords)
                continue
            system, user = assemble_input(
                trace.query,
                answer,
                [bank.get(i) for i in critical],
                [bank.get(i) for i in fresh],
                prompts,
            )
            rec = RoundRecord(
                len(trace.rounds) + 1, group.keywords, len(group.memories), fresh, None, False, []
            )
            out = _answer_into(trace, rec, system, user, main, list(critical) + fresh, critical)
            if out.answer is not None:
                answer = out.answer
            critical = out.critical_ids
            if out.sufficient:
                trace.stop_reason = "accepted"
                break
            if len(trace.rounds) >= config.max_rounds:
                trace.stop_reason = "max_rounds"
                break

    trace.final_answer = answer or ""
    trace.critical_ids = list(critical)
    if rewrite_answer and trace.final_answer:
        trace.rewritten_answer = rewrite(
            trace.final_answer,
            [bank.get(i) for i in critical],
            main,
            prompts,
            usage=trace.rewrite_usage,
            warnings=trace.warnings,
        )
    else:
        trace.rewritten_answer = trace.final_answer
