"""Prompt templates.

Each stage has a ``<stage>_system.txt`` and ``<stage>_user.txt`` template
using ``$name`` placeholders. A directory passed to :meth:`PromptSet.load`
overrides any subset of the packaged files.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

STAGES = ("extract", "match", "select", "answer", "rewrite")


@dataclass(frozen=True)
class PromptPair:
    system: Template
    user: Template

    def render(self, **values: object) -> tuple[str, str]:
        return self.system.substitute(values), self.user.substitute(values)


@dataclass(frozen=True)
class PromptSet:
    extract: PromptPair
    match: PromptPair
    select: PromptPair
    answer: PromptPair
    rewrite: PromptPair

    @classmethod
    def load(cls, directory: str | Path | None = None) -> PromptSet:
        packaged = resources.files(__name__)
        override = Path(directory) if directory else None
        pairs = {}
        for stage in STAGES:
            texts = []
            for part in ("system", "user"):
                name = f"{stage}_{part}.txt"
                if override is not None and (override / name).is_file():
                    texts.append((override / name).read_text(encoding="utf-8"))
                else:
                    texts.append(packaged.joinpath(name).read_text(encoding="utf-8"))
            pairs[stage] = PromptPair(Template(texts[0]), Template(texts[1]))
        return cls(**pairs)
