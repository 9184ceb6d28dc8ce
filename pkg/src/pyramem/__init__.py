"""Keyword-pyramid reflective retrieval over long-term conversational memory."""

from .ingest import ExtractionOutcome, IngestReport, extract_keywords, ingest, match_vocabulary
from .llm import (
    ChatRequest,
    ChatResponse,
    Gateway,
    OpenAIProvider,
    ProviderConfig,
    ScriptedProvider,
    parse_structured,
)
from .loop import LoopConfig, QueryTrace, run_query
from .metrics import MetricScores, bleu1, estimate_tokens, f1, meteor, rouge_2, rouge_l
from .prompts import PromptSet
from .pyramid import KeywordGroup, KeywordPyramid, build_pyramid, next_group, select_query_keywords
from .store import MemoryBank, MemoryRecord, SnapshotError, normalize_keyword

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "ExtractionOutcome",
    "Gateway",
    "IngestReport",
    "KeywordGroup",
    "KeywordPyramid",
    "LoopConfig",
    "MemoryBank",
    "MemoryRecord",
    "MetricScores",
    "OpenAIProvider",
    "PromptSet",
    "ProviderConfig",
    "QueryTrace",
    "ScriptedProvider",
    "SnapshotError",
    "bleu1",
    "build_pyramid",
    "estimate_tokens",
    "extract_keywords",
    "f1",
    "ingest",
    "match_vocabulary",
    "meteor",
    "next_group",
    "normalize_keyword",
    "parse_structured",
    "rouge_2",
    "rouge_l",
    "run_query",
    "select_query_keywords",
]
