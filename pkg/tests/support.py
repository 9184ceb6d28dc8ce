"""Shared builders for scripted tests."""

from __future__ import annotations

import json
import re
from datetime import datetime, timezone

from pyramem.llm import ChatRequest, Gateway, ScriptedProvider
from pyramem.store import MemoryBank

FIXED_TIME = datetime(2022, 4, 29, 12, 0, tzinfo=timezone.utc)
_BLOCK = re.compile(r"^\[(\d+)\] ", re.MULTILINE)


def gateways(main: ScriptedProvider | None = None, aux: ScriptedProvider | None = None):
    return (
        Gateway(main or ScriptedProvider(), name="main"),
        Gateway(aux or ScriptedProvider(), name="aux"),
    )


def assessment(answer: str, sufficient: bool, ids) -> str:
    return json.dumps({"answer": answer, "sufficient": sufficient, "critical_ids": list(ids)})


def shown_ids(prompt: str) -> list[int]:
    """Memory ids rendered as ``[id] ...`` blocks in a prompt."""
    return [int(m) for m in _BLOCK.findall(prompt)]


def section(prompt: str, title: str) -> str:
    """Body of one labeled section of an answer prompt."""
    parts = re.split(r"\n\n(?=[A-Z][A-Za-z ]+:)", prompt)
    for part in parts:
        if part.startswith(title + ":"):
            return part[len(title) + 1:].strip()
    raise KeyError(title)


def bank_from_postings(n_records: int, postings: dict[str, list[int]]) -> MemoryBank:
    bank = MemoryBank()
    for i in range(n_records):
        bank.add_record(f"question {i}?", f"answer {i}.", f"session {i % 3}", FIXED_TIME)
    per_memory: dict[int, list[str]] = {}
    for kw, ids in postings.items():
        for mid in ids:
            per_memory.setdefault(mid, []).append(kw)
    for mid in sorted(per_memory):
        bank.register_keywords(mid, per_memory[mid])
    return bank


def selector(keywords) -> str:
    return json.dumps({"keywords": list(keywords)})


def request_text(req: ChatRequest) -> str:
    return req.user_prompt


WALKTHROUGH_QUERY = "When did James finish the adventure book?"

_WALKTHROUGH_MEMORIES = [
    ("What is James reading?", "An adventure book about a lighthouse keeper.", "james", "adventure", "book"),
    ("Does James like the adventure book?", "He says the book is the best adventure he has read.", "james", "adventure", "book"),
    ("How far is James in the adventure book?", "About halfway through the book.", "james", "adventure", "book"),
    ("Where did James go hiking?", "An adventure trail near the coast.", "james", "adventure"),
    ("Who joined James on the adventure?", "His cousin Mara.", "james", "adventure"),
    ("What did James pack for the adventure?", "A tent and a camera.", "james", "adventure"),
    ("Did James enjoy the adventure?", "Yes, despite the rain.", "james", "adventure"),
    ("What adventure does James plan next?", "Kayaking in the summer.", "james", "adventure"),
    ("Did James film the adventure?", "He posted a short video.", "james", "adventure"),
    ("Has James finished any book lately?", "He finished it three days ago.", "james", "book"),
    ("What will James read next?", "A book about mountaineering.", "james", "book"),
]


def walkthrough():
    """Bank and scripts for the three-round walkthrough.

    Round 1 sees memories 0-2, round 2 the six memories 3-8 that only share
    "james adventure", round 3 memories 9-10 under "james book" and accepts.
    """
    bank = MemoryBank()
    for q, a, *kws in _WALKTHROUGH_MEMORIES:
        mid = bank.add_record(q, a, "29 April 2022", FIXED_TIME)
        bank.register_keywords(mid, kws)
    main = ScriptedProvider()
    main.on("answer", assessment("three days ago", True, [2, 9]), contains="\n[9] ")
    main.on("answer", assessment("three days ago", False, [0, 2]), contains="\n[3] ")
    main.on("answer", assessment("three days ago", False, [0, 2]))
    main.on("rewrite", "26 April 2022", contains="three days ago")
    aux = ScriptedProvider().on("select", selector(["james", "adventure", "book"]))
    return bank, main, aux


_WORD = re.compile(r"[a-z]{4,}")
_STOP = {"what", "when", "where", "which", "does", "with", "about", "have", "that", "this", "your", "from"}


def _content_words(text: str) -> list[str]:
    return [w for w in dict.fromkeys(_WORD.findall(text.lower())) if w not in _STOP]


def _line(prompt: str, label: str) -> str:
    m = re.search(rf"^{label}: (.*)$", prompt, re.MULTILINE)
    return m.group(1) if m else ""


def _blocks(text: str) -> list[tuple[int, str, str]]:
    out = []
    for m in re.finditer(r"^\[(\d+)\] (.*?) / (.*?) / .*$", text, re.MULTILINE):
        out.append((int(m.group(1)), m.group(2), m.group(3)))
    return out


def toy_world():
    """Rule-based scripted providers for end-to-end runs.

    Keywords are the content words of a memory's question; selection keeps
    query words present in the vocabulary. A round is sufficient once a
    shown memory's answer contains the query's last content word, and the
    answer is the answer text of the first relevant memory.
    """

    def extract(req):
        return selector(_content_words(_line(req.user_prompt, "Question"))[:4])

    def select(req):
        vocab = set(re.findall(r"^- (.*)$", req.user_prompt, re.MULTILINE))
        return selector([w for w in _content_words(_line(req.user_prompt, "Question")) if w in vocab])

    def answer(req):
        words = _content_words(_line(req.user_prompt, "Question"))
        shown = _blocks(req.user_prompt)
        relevant = [b for b in shown if any(w in (b[1] + " " + b[2]).lower() for w in words)]
        text = relevant[0][2] if relevant else (_line(req.user_prompt, "Previous answer") or "unknown")
        done = bool(words) and any(words[-1] in b[2].lower() for b in shown)
        return assessment(text, done, [b[0] for b in relevant])

    def rewrite(req):
        return _line(req.user_prompt, "Draft answer").rstrip(".")

    main = ScriptedProvider().on("answer", answer).on("rewrite", rewrite)
    aux = ScriptedProvider().on("extract", extract).on("select", select)
    aux.on("match", json.dumps({"matches": {}}))
    return main, aux
