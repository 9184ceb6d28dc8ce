"""Append-only memory bank with a keyword vocabulary and inverted mapping.

The bank holds three pieces of state:

* ``records``: memory id -> :class:`MemoryRecord`, never overwritten.
* ``vocabulary``: normalized keywords in insertion order, never shrunk.
* ``mapping``: keyword -> sorted, duplicate-free list of memory ids.

Snapshots are a single JSON document (see :func:`MemoryBank.snapshot`).
"""

from __future__ import annotations

import bisect
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_SNAPSHOT_FIELDS = ("format_version", "records", "vocabulary", "mapping")
_RECORD_FIELDS = ("id", "question", "answer", "session", "ingested_at")


class ValidationError(ValueError):
    """Rejected input, e.g. an empty question or answer."""


class UnknownMemoryError(LookupError):
    """A memory id that is not in the bank."""


class SnapshotError(ValueError):
    """A snapshot file that cannot be loaded."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


def normalize_keyword(keyword: str) -> str:
    """Case-fold, trim and collapse internal whitespace."""
    return " ".join(keyword.casefold().split())


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class MemoryRecord:
    id: int
    question: str
    answer: str
    session: str | None = None
    ingested_at: datetime = field(default_factory=_utcnow)

    def render(self) -> str:
        """One prompt block: ``[id] question / answer / session``."""
        session = self.session if self.session else "none"
        return f"[{self.id}] {self.question} / {self.answer} / {session}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "session": self.session,
            "ingested_at": self.ingested_at.isoformat(),
        }


def merge_intersect(a: list[int], b: list[int]) -> list[int]:
    """Intersection of two ascending id lists by linear merge."""
    out: list[int] = []
    i = j = 0
    while i < len(a) and j < len(b):
        x, y = a[i], b[j]
        if x == y:
            out.append(x)
            i += 1
            j += 1
        elif x < y:
            i += 1
        else:
            j += 1
    return out


class MemoryBank:
    """Records, keyword vocabulary and keyword -> memory mapping.

    Writes are serialized through an internal lock; readers see plain
    containers and should not mutate them.
    """

    def __init__(self) -> None:
        self.records: dict[int, MemoryRecord] = {}
        self.vocabulary: list[str] = []
        self.mapping: dict[str, list[int]] = {}
        self.format_version = FORMAT_VERSION
        self._vocab_index: dict[str, int] = {}
        self._next_id = 0
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and self.records == other.records
            and self.vocabulary == other.vocabulary
            and self.mapping == other.mapping
        )

    def __getstate__(self) -> dict[str, Any]:
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state: dict[str, Any]) -> None:
        self.__dict__.update(state)
        self._lock = threading.RLock()

    @property
    def next_id(self) -> int:
        return self._next_id

    def get(self, memory_id: int) -> MemoryRecord:
        try:
            return self.records[memory_id]
        except KeyError:
            raise UnknownMemoryError(f"no memory with id {memory_id}") from None

    def add_record(
        self,
        question: str,
        answer: str,
        session: str | None = None,
        ingested_at: datetime | None = None,
    ) -> int:
        if not question or not question.strip():
            raise ValidationError("question must be non-empty")
        if not answer or not answer.strip():
            raise ValidationError("answer must be non-empty")
        with self._lock:
            memory_id = self._next_id
            self.records[memory_id] = MemoryRecord(
                id=memory_id,
                question=question,
                answer=answer,
                session=session,
                ingested_at=ingested_at or _utcnow(),
            )
            self._next_id += 1
        return memory_id

    def register_keywords(
        self, memory_id: int, keywords: Iterable[str]
    ) -> tuple[list[str], int]:
        """Insert unseen keywords into the vocabulary and index ``memory_id``.

        Returns the keywords that were new to the vocabulary and the number of
        posting lists that actually gained ``memory_id``.
        """
        normalized: list[str] = []
        for kw in keywords:
            norm = normalize_keyword(kw)
            if norm and norm not in normalized:
                normalized.append(norm)
        if not normalized:
            raise ValidationError("keyword list must be non-empty")
        with self._lock:
            if memory_id not in self.records:
                raise UnknownMemoryError(f"no memory with id {memory_id}")
            new_entries: list[str] = []
            updated = 0
            for kw in normalized:
                if kw not in self._vocab_index:
                    self._vocab_index[kw] = len(self.vocabulary)
                    self.vocabulary.append(kw)
                    self.mapping[kw] = []
                    new_entries.append(kw)
                postings = self.mapping[kw]
                pos = bisect.bisect_left(postings, memory_id)
                if pos == len(postings) or postings[pos] != memory_id:
                    postings.insert(pos, memory_id)
                    updated += 1
        return new_entries, updated

    def associated_memories(self, keyword: str) -> list[int]:
        """Posting list for ``keyword``; empty for unknown keywords."""
        return list(self.mapping.get(normalize_keyword(keyword), ()))

    def has_keyword(self, keyword: str) -> bool:
        return normalize_keyword(keyword) in self._vocab_index

    def indexed_ids(self) -> set[int]:
        return {mid for postings in self.mapping.values() for mid in postings}

    # -- persistence ---------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "records": [self.records[k].to_dict() for k in sorted(self.records)],
            "vocabulary": list(self.vocabulary),
            "mapping": {kw: list(self.mapping[kw]) for kw in self.vocabulary},
        }

    def snapshot(self, path: str | Path) -> None:
        path = Path(path)
        with self._lock:
            text = json.dumps(self.to_dict(), ensure_ascii=False, indent=2)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text + "\n", encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> MemoryBank:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise SnapshotError("file", str(exc)) from exc
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SnapshotError("document", f"not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: Any) -> MemoryBank:
        if not isinstance(doc, dict):
            raise SnapshotError("document", "top level must be an object")
        unknown = sorted(set(doc) - set(_SNAPSHOT_FIELDS))
        if unknown:
            raise SnapshotError(unknown[0], "unknown top-level field")
        for name in _SNAPSHOT_FIELDS:
            if name not in doc:
                raise SnapshotError(name, "missing")
        version = doc["format_version"]
        if type(version) is not int:
            raise SnapshotError("format_version", "must be an integer")
        if version != FORMAT_VERSION:
            raise SnapshotError(
                "format_version", f"unsupported version {version} (expected {FORMAT_VERSION})"
            )

        bank = cls()
        records = doc["records"]
        if not isinstance(records, list):
            raise SnapshotError("records", "must be an array")
        for i, rec in enumerate(records):
            bank._load_record(f"records[{i}]", rec)

        vocabulary = doc["vocabulary"]
        if not isinstance(vocabulary, list):
            raise SnapshotError("vocabulary", "must be an array")
        for i, kw in enumerate(vocabulary):
            where = f"vocabulary[{i}]"
            if not isinstance(kw, str) or not kw:
                raise SnapshotError(where, "must be a non-empty string")
            if normalize_keyword(kw) != kw:
                raise SnapshotError(where, f"keyword {kw!r} is not normalized")
            if kw in bank._vocab_index:
                raise SnapshotError(where, f"duplicate keyword {kw!r}")
            bank._vocab_index[kw] = i
            bank.vocabulary.append(kw)

        mapping = doc["mapping"]
        if not isinstance(mapping, dict):
            raise SnapshotError("mapping", "must be an object")
        for kw, ids in mapping.items():
            where = f"mapping[{kw!r}]"
            if kw not in bank._vocab_index:
                raise SnapshotError(where, "keyword not in vocabulary")
            if not isinstance(ids, list) or any(type(x) is not int for x in ids):
                raise SnapshotError(where, "must be an array of integers")
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise SnapshotError(where, "ids must be strictly ascending")
            missing = [x for x in ids if x not in bank.records]
            if missing:
                raise SnapshotError(where, f"unknown memory id {missing[0]}")
            bank.mapping[kw] = list(ids)
        for kw in bank.vocabulary:
            if kw not in bank.mapping:
                raise SnapshotError(f"mapping[{kw!r}]", "missing posting list")
        return bank

    def _load_record(self, where: str, rec: Any) -> None:
        if not isinstance(rec, dict):
            raise SnapshotError(where, "must be an object")
        for name in _RECORD_FIELDS:
            if name not in rec:
                raise SnapshotError(f"{where}.{name}", "missing")
        extra = sorted(set(rec) - set(_RECORD_FIELDS))
        if extra:
            raise SnapshotError(f"{where}.{extra[0]}", "unknown field")
        mid = rec["id"]
        if type(mid) is not int or mid < 0:
            raise SnapshotError(f"{where}.id", "must be a non-negative integer")
        if mid in self.records:
            raise SnapshotError(f"{where}.id", f"duplicate id {mid}")
        for name in ("question", "answer"):
            value = rec[name]
            if not isinstance(value, str) or not value.strip():
                raise SnapshotError(f"{where}.{name}", "must be a non-empty string")
        session = rec["session"]
        if session is not None and not isinstance(session, str):
            raise SnapshotError(f"{where}.session", "must be a string or null")
        stamp = rec["ingested_at"]
        if not isinstance(stamp, str):
            raise SnapshotError(f"{where}.ingested_at", "must be an RFC-3339 string")
        try:
            when = datetime.fromisoformat(stamp[:-1] + "+00:00" if stamp.endswith("Z") else stamp)
        except ValueError as exc:
            raise SnapshotError(f"{where}.ingested_at", str(exc)) from exc
        if when.tzinfo is None:
            raise SnapshotError(f"{where}.ingested_at", "timezone offset required")
        self.records[mid] = MemoryRecord(mid, rec["question"], rec["answer"], session, when)
        self._next_id = max(self._next_id, mid + 1)

    @classmethod
    def from_records(
        cls, rows: Iterable[tuple[str, str, str | None]], keywords: Mapping[int, Iterable[str]]
    ) -> MemoryBank:
        """Build a bank directly from rows and per-row keywords (no LLM)."""
        bank = cls()
        for i, (q, a, s) in enumerate(rows):
            mid = bank.add_record(q, a, s)
            kws = list(keywords.get(i, ()))
            if kws:
                bank.register_keywords(mid, kws)
        return bank
