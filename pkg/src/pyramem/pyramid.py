"""Keyword pyramid: the lattice of query-keyword subsets and its traversal order.

For selected keywords ``Q`` (n of them), level ``l`` holds every l-subset of
``Q``. A group's memories are the intersection of its keywords' posting
lists. Traversal runs from level n down to level 1; within a level, groups
with more memories come first, ties broken by the sorted keyword tuple.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Mapping, Sequence

from .llm import ChatRequest, Gateway, Usage, parse_structured
from .prompts import PromptSet
from .store import merge_intersect, normalize_keyword

logger = logging.getLogger(__name__)

DEFAULT_DEPTH = 4
MAX_DEPTH = 8


@dataclass(frozen=True)
class KeywordGroup:
    keywords: tuple[str, ...]
    memories: tuple[int, ...]

    @property
    def level(self) -> int:
        return len(self.keywords)

    def label(self) -> str:
        return " ".join(self.keywords)


@dataclass(frozen=True)
class KeywordPyramid:
    query_keywords: tuple[str, ...]
    levels: Mapping[int, tuple[KeywordGroup, ...]]
    traversal: tuple[KeywordGroup, ...]

    def __len__(self) -> int:
        return len(self.traversal)

    def to_dict(self) -> dict:
        return {
            "query_keywords": list(self.query_keywords),
            "levels": {
                str(level): [
                    {"keywords": list(g.keywords), "size": len(g.memories), "memories": list(g.memories)}
                    for g in groups
                ]
                for level, groups in sorted(self.levels.items())
            },
            "traversal": [list(g.keywords) for g in self.traversal],
        }


class PyramidUnavailable(Exception):
    """No usable query keywords; the caller must fall back."""


def select_query_keywords(
    query: str,
    vocabulary: Sequence[str],
    gateway: Gateway,
    prompts: PromptSet,
    depth_cap: int = DEFAULT_DEPTH,
    usage: Usage | None = None,
) -> list[str]:
    """Ask the model for up to ``depth_cap`` vocabulary keywords relevant to ``query``.

    Keywords outside the vocabulary are dropped. Raises
    :class:`PyramidUnavailable` if nothing usable remains.
    """
    if depth_cap < 1:
        raise ValueError("depth_cap must be >= 1")
    if not vocabulary:
        raise PyramidUnavailable("vocabulary is empty")
    system, user = prompts.select.render(
        query=query,
        vocabulary="\n".join(f"- {v}" for v in vocabulary),
        max_keywords=depth_cap,
    )
    resp = gateway.complete(ChatRequest(system, user, "select"))
    if usage is not None:
        usage.add(resp)
    known = set(vocabulary)
    selected: list[str] = []
    for kw in parse_structured(resp.text, "selection"):
        norm = normalize_keyword(kw)
        if norm not in known:
            logger.warning("selected keyword %r is not in the vocabulary; dropped", kw)
        elif norm not in selected:
            selected.append(norm)
    if not selected:
        raise PyramidUnavailable("no selected keyword is in the vocabulary")
    return selected[:depth_cap]


def build_pyramid(
    query_keywords: Sequence[str],
    postings: Mapping[str, Sequence[int]] | Callable[[str], Sequence[int]],
) -> KeywordPyramid:
    """Enumerate every non-empty subset of ``query_keywords`` with its memories.

    ``postings`` is a keyword -> ascending id list mapping (or a lookup
    function); missing keywords have no memories.
    """
    q = tuple(dict.fromkeys(query_keywords))
    if not q:
        raise ValueError("at least one query keyword is required")
    if len(q) > MAX_DEPTH:
        raise ValueError(f"at most {MAX_DEPTH} query keywords are supported")
    lookup = postings if callable(postings) else (lambda k: postings.get(k, ()))
    ordered = tuple(sorted(q))
    # Each subset's memories extend the memories of the subset without its
    # last keyword, so every group costs one merge.
    memo: dict[tuple[str, ...], list[int]] = {(): []}
    for kw in ordered:
        memo[(kw,)] = list(lookup(kw))
    levels: dict[int, tuple[KeywordGroup, ...]] = {}
    for level in range(1, len(ordered) + 1):
        groups = []
        for combo in combinations(ordered, level):
            if level > 1:
                memo[combo] = merge_intersect(memo[combo[:-1]], memo[(combo[-1],)])
            groups.append(KeywordGroup(combo, tuple(memo[combo])))
        groups.sort(key=lambda g: (-len(g.memories), g.keywords))
        levels[level] = tuple(groups)
    traversal = tuple(g for level in range(len(ordered), 0, -1) for g in levels[level])
    return KeywordPyramid(q, levels, traversal)


def next_group(pyramid: KeywordPyramid, cursor: int) -> tuple[KeywordGroup, int] | None:
    if not 0 <= cursor <= len(pyramid.traversal):
        raise IndexError(f"cursor {cursor} out of range")
    if cursor == len(pyramid.traversal):
        return None
    return pyramid.traversal[cursor], cursor + 1
