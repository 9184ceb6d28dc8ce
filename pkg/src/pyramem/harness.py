"""Dataset loading, batch evaluation, cost accounting and reports."""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

from .ingest import IngestReport, ingest
from .llm import Gateway, LLMError, OpenAIProvider, ProviderConfig, ScriptedProvider, Usage
from .loop import LoopConfig, QueryFailed, QueryTrace, run_query
from .metrics import METRIC_NAMES, ROUGE_L_BETA, MetricError, MetricScores, aggregate, score
from .prompts import PromptSet
from .store import MemoryBank, SnapshotError

logger = logging.getLogger(__name__)

CATEGORIES = ("single_hop", "multi_hop", "temporal", "open_domain")
# LoCoMo QA category codes; 5 (adversarial) is outside the four evaluated
# categories and is skipped.
LOCOMO_CATEGORIES = {1: "multi_hop", 2: "temporal", 3: "open_domain", 4: "single_hop"}
LOCOMO_SKIPPED = {5}

DatasetFormat = Literal["locomo_json", "simple_jsonl"]


class DatasetError(ValueError):
    def __init__(self, where: str, message: str) -> None:
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass(frozen=True)
class EvalQuestion:
    id: str
    question: str
    references: tuple[str, ...]
    category: str
    conversation_id: str


@dataclass
class Dataset:
    memories: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    questions: list[EvalQuestion] = field(default_factory=list)
    skipped: int = 0


def _make_question(where: str, qid: str, question: Any, refs: Any, category: Any, conv: str) -> EvalQuestion:
    if not isinstance(question, str) or not question.strip():
        raise DatasetError(f"{where}.question", "must be a non-empty string")
    if isinstance(refs, (str, int, float)):
        refs = [refs]
    if not isinstance(refs, list):
        raise DatasetError(f"{where}.answers", "must be a list of strings")
    refs = [str(r) for r in refs if str(r).strip()]
    if not refs:
        raise DatasetError(f"{where}.answers", "needs at least one non-empty answer")
    if category not in CATEGORIES:
        raise DatasetError(f"{where}.category", f"unknown category {category!r}")
    return EvalQuestion(qid, question, tuple(refs), category, conv)


def _load_simple_jsonl(path: Path) -> Dataset:
    """One JSON object per line.

    ``{"type": "memory", "conversation", "question", "answer", "session"?}``
    or ``{"type": "question", "conversation", "id"?, "question", "answers",
    "category"}``.
    """
    ds = Dataset()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(where, f"invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise DatasetError(where, "must be an object")
        conv = str(obj.get("conversation", "default"))
        kind = obj.get("type")
        if kind == "memory":
            q, a = obj.get("question"), obj.get("answer")
            if not isinstance(q, str) or not q.strip() or not isinstance(a, str) or not a.strip():
                raise DatasetError(where, "memory needs non-empty 'question' and 'answer'")
            ds.memories.setdefault(conv, []).append(
                {"question": q, "answer": a, "session": obj.get("session")}
            )
        elif kind == "question":
            qid = str(obj.get("id", f"q{len(ds.questions)}"))
            ds.questions.append(
                _make_question(where, qid, obj.get("question"), obj.get("answers"),
                               obj.get("category"), conv)
            )
            ds.memories.setdefault(conv, [])
        else:
            raise DatasetError(f"{where}.type", f"expected 'memory' or 'question', got {kind!r}")
    return ds


def _turn_text(turn: dict[str, Any]) -> str:
    text = f"{turn.get('speaker', 'unknown')}: {turn.get('text', '')}".strip()
    if turn.get("blip_caption"):
        text += f" [shares an image: {turn['blip_caption']}]"
    return text


def _load_locomo(path: Path) -> Dataset:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError("$", f"invalid JSON ({exc})") from exc
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list):
        raise DatasetError("$", "expected a list of conversation samples")
    ds = Dataset()
    for si, sample in enumerate(doc):
        where = f"$[{si}]"
        if not isinstance(sample, dict):
            raise DatasetError(where, "must be an object")
        conv_id = str(sample.get("sample_id", f"conv-{si}"))
        conversation = sample.get("conversation")
        if not isinstance(conversation, dict):
            raise DatasetError(f"{where}.conversation", "must be an object")
        sessions = []
        for key, turns in conversation.items():
            parts = key.split("_")
            if len(parts) == 2 and parts[0] == "session" and parts[1].isdigit():
                if not isinstance(turns, list):
                    raise DatasetError(f"{where}.conversation.{key}", "must be a list of turns")
                sessions.append((int(parts[1]), key, turns))
        sessions.sort()
        memories = ds.memories.setdefault(conv_id, [])
        for _, key, turns in sessions:
            stamp = conversation.get(f"{key}_date_time")
            label = f"{key} ({stamp})" if stamp else key
            texts = []
            for ti, turn in enumerate(turns):
                if not isinstance(turn, dict):
                    raise DatasetError(f"{where}.conversation.{key}[{ti}]", "must be an object")
                texts.append(_turn_text(turn))
            for i in range(0, len(texts), 2):
                reply = texts[i + 1] if i + 1 < len(texts) else "(no reply)"
                memories.append({"question": texts[i], "answer": reply, "session": label})
        qa = sample.get("qa", [])
        if not isinstance(qa, list):
            raise DatasetError(f"{where}.qa", "must be a list")
        for qi, item in enumerate(qa):
            qwhere = f"{where}.qa[{qi}]"
            if not isinstance(item, dict):
                raise DatasetError(qwhere, "must be an object")
            code = item.get("category")
            if code in LOCOMO_SKIPPED:
                ds.skipped += 1
                continue
            if code not in LOCOMO_CATEGORIES:
                raise DatasetError(f"{qwhere}.category", f"unknown category code {code!r}")
            if "answer" not in item:
                raise DatasetError(f"{qwhere}.answer", "missing")
            ds.questions.append(
                _make_question(qwhere, f"{conv_id}/{qi}", item.get("question"), item["answer"],
                               LOCOMO_CATEGORIES[code], conv_id)
            )
    return ds


def load_dataset(path: str | Path, fmt: DatasetFormat = "simple_jsonl") -> Dataset:
    path = Path(path)
    if fmt == "simple_jsonl":
        return _load_simple_jsonl(path)
    if fmt == "locomo_json":
        return _load_locomo(path)
    raise ValueError(f"unknown dataset format {fmt!r}")


# -- evaluation ------------------------------------------------------------


@dataclass
class QuestionResult:
    question: EvalQuestion
    trace: QueryTrace | None
    scores: MetricScores
    elapsed: float
    error: str | None = None

    @property
    def main_usage(self) -> Usage:
        return self.trace.main_usage if self.trace else Usage()

    @property
    def aux_usage(self) -> Usage:
        return self.trace.aux_usage if self.trace else Usage()

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.question.id,
            "conversation": self.question.conversation_id,
            "category": self.question.category,
            "question": self.question.question,
            "references": list(self.question.references),
            "prediction": self.trace.rewritten_answer if self.trace else "",
            "scores": self.scores.as_dict(),
            "error": self.error,
            "trace": self.trace.to_dict(include_timing) if self.trace else None,
        }
        if include_timing:
            out["elapsed"] = self.elapsed
        return out


@dataclass
class EvalRun:
    config: dict[str, Any]
    results: list[QuestionResult] = field(default_factory=list)
    ingestion: dict[str, IngestReport] = field(default_factory=dict)
    memory_items: int = 0

    def report(self) -> dict[str, Any]:
        rows, overall = aggregate(
            [(r.question.category, r.scores) for r in self.results], CATEGORIES
        )
        return {
            "categories": [
                {"category": row.category, "count": row.count, **row.means} for row in rows
            ],
            "overall": overall,
            "questions": len(self.results),
            "failures": sum(1 for r in self.results if r.error),
        }

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        return {
            "config": self.config,
            "report": self.report(),
            "cost": cost_report(self, include_timing),
            "rounds": round_profile(self),
            "results": [r.to_dict(include_timing) for r in self.results],
        }


def bank_cache_key(items: Sequence[dict[str, Any]], extra: str = "") -> str:
    blob = json.dumps([items, extra], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_bank(
    items: Sequence[dict[str, Any]],
    aux: Gateway,
    prompts: PromptSet,
    cache_dir: Path | None = None,
    cache_tag: str = "",
) -> tuple[MemoryBank, IngestReport]:
    """Ingest ``items`` into a fresh bank, reusing a cached snapshot if present."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"bank-{bank_cache_key(items, cache_tag)}.json"
        if path.is_file():
            try:
                return MemoryBank.load(path), IngestReport()
            except SnapshotError as exc:
                logger.warning("ignoring unreadable cached bank %s: %s", path, exc)
    bank = MemoryBank()
    report = ingest(items, bank, aux, prompts)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        bank.snapshot(path)
    return bank, report


def _evaluate_question(
    q: EvalQuestion, bank: MemoryBank, main: Gateway, aux: Gateway,
    prompts: PromptSet, config: LoopConfig,
) -> QuestionResult:
    start = time.perf_counter()
    trace: QueryTrace | None = None
    error = None
    try:
        trace = run_query(q.question, bank, main, aux, prompts, config)
    except QueryFailed as exc:
        trace, error = exc.trace, str(exc)
    except (LLMError, ValueError, LookupError) as exc:
        error = f"{type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - start
    if error is not None or trace is None:
        logger.warning("question %s failed: %s", q.id, error)
        return QuestionResult(q, trace, MetricScores.zero(), elapsed, error)
    try:
        scores = score(trace.rewritten_answer, q.references)
    except MetricError as exc:
        return QuestionResult(q, trace, MetricScores.zero(), elapsed, f"MetricError: {exc}")
    return QuestionResult(q, trace, scores, elapsed)


def evaluate(
    dataset: Dataset,
    main: Gateway,
    aux: Gateway,
    prompts: PromptSet | None = None,
    config: LoopConfig | None = None,
    cache_dir: str | Path | None = None,
    parallelism: int = 1,
    banks: dict[str, MemoryBank] | None = None,
) -> EvalRun:
    """Build a bank per conversation and answer every question against it.

    Results keep the dataset's question order whatever the parallelism.
    """
    prompts = prompts or PromptSet.load()
    config = config or LoopConfig()
    run = EvalRun(
        config={
            "depth": config.depth_cap,
            "max_rounds": config.max_rounds,
            "rouge_l_beta": ROUGE_L_BETA,
            "main_provider": main.name,
            "aux_provider": aux.name,
        }
    )
    banks = dict(banks or {})
    conversations = list(dataset.memories)
    for q in dataset.questions:
        if q.conversation_id not in conversations:
            conversations.append(q.conversation_id)
    for conv in conversations:
        if conv in banks:
            continue
        items = dataset.memories.get(conv, [])
        banks[conv], run.ingestion[conv] = build_bank(
            items, aux, prompts, Path(cache_dir) if cache_dir else None, aux.name
        )
        run.memory_items += len(items)

    def job(q: EvalQuestion) -> QuestionResult:
        return _evaluate_question(q, banks[q.conversation_id], main, aux, prompts, config)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            run.results = list(pool.map(job, dataset.questions))
    else:
        run.results = [job(q) for q in dataset.questions]
    return run


def _mean(total: float, n: int) -> float:
    return total / n if n else 0.0


def cost_report(run: EvalRun, include_timing: bool = True) -> dict[str, Any]:
    """Calls and estimated tokens per memory item and per question.

    Main and auxiliary models are reported separately; the main model does
    no work during memory construction.
    """
    ingest_usage = Usage()
    for rep in run.ingestion.values():
        ingest_usage += rep.usage
    main_q, aux_q = Usage(), Usage()
    for r in run.results:
        main_q += r.main_usage
        aux_q += r.aux_usage
    n_items, n_q = run.memory_items, len(run.results)
    out: dict[str, Any] = {
        "memory": {
            "items": n_items,
            "main_calls": 0.0,
            "main_tokens": 0.0,
            "aux_calls": _mean(ingest_usage.calls, n_items),
            "aux_tokens": _mean(ingest_usage.tokens, n_items),
        },
        "response": {
            "questions": n_q,
            "main_calls": _mean(main_q.calls, n_q),
            "main_tokens": _mean(main_q.tokens, n_q),
            "aux_calls": _mean(aux_q.calls, n_q),
            "aux_tokens": _mean(aux_q.tokens, n_q),
        },
        "totals": {
            "main_calls": main_q.calls,
            "main_tokens": main_q.tokens,
            "aux_calls": ingest_usage.calls + aux_q.calls,
            "aux_tokens": ingest_usage.tokens + aux_q.tokens,
        },
    }
    if include_timing:
        out["response"]["time"] = _mean(math.fsum(r.elapsed for r in run.results), n_q)
    return out


def round_profile(run: EvalRun) -> list[dict[str, Any]]:
    """Per-round counts: questions reaching the round and accepted in it."""
    depth = max((len(r.trace.rounds) for r in run.results if r.trace), default=0)
    rows = []
    cumulative = 0
    for k in range(1, depth + 1):
        reached = sum(1 for r in run.results if r.trace and len(r.trace.rounds) >= k)
        accepted = sum(
            1 for r in run.results
            if r.trace and r.trace.stop_reason == "accepted" and len(r.trace.rounds) == k
        )
        cumulative += accepted
        rows.append({"round": k, "samples": reached, "accepted": accepted,
                     "accepted_cumulative": cumulative})
    return rows


# -- reports ---------------------------------------------------------------

_COLUMNS = ("F1", "BLEU-1", "ROUGE-L", "ROUGE-2", "METEOR")


def format_report(run_dict: dict[str, Any]) -> str:
    report, cost = run_dict["report"], run_dict["cost"]
    lines = [f"{'Category':<12} {'N':>4} " + " ".join(f"{c:>8}" for c in _COLUMNS)]
    for row in report["categories"]:
        lines.append(
            f"{row['category']:<12} {row['count']:>4} "
            + " ".join(f"{100 * row[m]:>8.2f}" for m in METRIC_NAMES)
        )
    lines.append(
        f"{'weighted':<12} {report['questions']:>4} "
        + " ".join(f"{100 * report['overall'][m]:>8.2f}" for m in METRIC_NAMES)
    )
    lines.append("")
    lines.append(format_cost(cost))
    return "\n".join(lines) + "\n"


def format_cost(cost: dict[str, Any]) -> str:
    mem, resp = cost["memory"], cost["response"]
    time_col = f"{resp['time']:>9.2f}" if "time" in resp else f"{'-':>9}"
    return "\n".join([
        f"{'':<6} {'Mem calls':>10} {'Mem tokens':>11} {'Resp calls':>11} {'Resp tokens':>12} {'Time (s)':>9}",
        f"{'main':<6} {mem['main_calls']:>10.2f} {mem['main_tokens']:>11.2f} "
        f"{resp['main_calls']:>11.2f} {resp['main_tokens']:>12.2f} {time_col}",
        f"{'aux':<6} {mem['aux_calls']:>10.2f} {mem['aux_tokens']:>11.2f} "
        f"{resp['aux_calls']:>11.2f} {resp['aux_tokens']:>12.2f} {'':>9}",
    ])


def write_run(run: EvalRun, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = run.to_dict()
    paths = {"json": out / "report.json", "text": out / "report.txt"}
    paths["json"].write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    paths["text"].write_text(format_report(doc), encoding="utf-8")
    return paths


# -- config ----------------------------------------------------------------


@dataclass
class Settings:
    main: Gateway
    aux: Gateway
    loop: LoopConfig
    prompts: PromptSet
    parallelism: int = 1


def _gateway_from_section(name: str, section: configparser.SectionProxy, base: Path) -> Gateway:
    kind = section.get("kind", "openai")
    if kind == "scripted":
        script = section.get("script")
        if not script:
            raise ValueError(f"[provider.{name}] kind=scripted needs 'script'")
        doc = json.loads((base / script).read_text(encoding="utf-8"))
        return Gateway(ScriptedProvider.from_dict(doc), name=f"scripted:{name}")
    if kind != "openai":
        raise ValueError(f"[provider.{name}] unknown kind {kind!r}")
    cfg = ProviderConfig(
        base_url=section.get("base_url", "https://api.openai.com/v1"),
        model_name=section.get("model_name", "gpt-4o-mini"),
        api_key_env=section.get("api_key_env", "OPENAI_API_KEY"),
        request_timeout=section.getfloat("timeout", 60.0),
        max_retries=section.getint("retries", 3),
    )
    return Gateway(OpenAIProvider(cfg), name=cfg.model_name)


def load_settings(path: str | Path | None) -> Settings:
    """Read ``[provider.main]``, ``[provider.aux]``, ``[retrieval]``, ``[prompts]``."""
    parser = configparser.ConfigParser()
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        base = path.parent
    main_section = parser["provider.main"] if parser.has_section("provider.main") else parser["DEFAULT"]
    main = _gateway_from_section("main", main_section, base)
    if parser.has_section("provider.aux"):
        aux = _gateway_from_section("aux", parser["provider.aux"], base)
    else:
        aux = _gateway_from_section("aux", main_section, base)
    retrieval = parser["retrieval"] if parser.has_section("retrieval") else parser["DEFAULT"]
    loop = LoopConfig(
        depth_cap=retrieval.getint("depth", 4), max_rounds=retrieval.getint("max_rounds", 4)
    )
    prompt_dir = None
    if parser.has_section("prompts") and parser["prompts"].get("directory"):
        prompt_dir = base / parser["prompts"]["directory"]
    parallelism = parser.getint("evaluate", "parallelism", fallback=1)
    return Settings(main, aux, loop, PromptSet.load(prompt_dir), parallelism)
