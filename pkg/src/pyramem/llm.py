"""Chat-completion gateway: providers, structured output parsing, accounting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Protocol

import httpx

from .metrics import estimate_tokens

logger = logging.getLogger(__name__)

ROLES = ("extract", "match", "select", "answer", "rewrite")
Role = Literal["extract", "match", "select", "answer", "rewrite"]


class LLMError(Exception):
    """Base class for gateway failures."""


class PreconditionError(LLMError, ValueError):
    pass


class TransportError(LLMError):
    """The endpoint could not be reached after all retries."""


class HTTPStatusError(LLMError):
    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class MissingAPIKeyError(LLMError):
    pass


class ScriptMissError(LLMError):
    """The scripted provider has no response for a request."""


class ParseError(LLMError, ValueError):
    """A completion that does not satisfy the requested schema."""

    def __init__(self, message: str, snippet: str = "") -> None:
        super().__init__(f"{message}: {snippet[:120]!r}" if snippet else message)
        self.snippet = snippet


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    role_tag: Role
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.role_tag not in ROLES:
            raise PreconditionError(f"unknown role_tag {self.role_tag!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise PreconditionError("temperature must be in [0, 2]")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    estimated_tokens_in: float
    estimated_tokens_out: float
    latency: float

    @property
    def tokens(self) -> float:
        return self.estimated_tokens_in + self.estimated_tokens_out


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    request_timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be > 0")


class Provider(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class OpenAIProvider:
    """``POST {base_url}/chat/completions`` with bearer-token auth."""

    def __init__(
        self,
        config: ProviderConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
    ) -> None:
        self.config = config
        self._client = client or httpx.Client(timeout=config.request_timeout)
        self._sleep = sleep
        self._backoff_base = backoff_base
        self.attempts = 0

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise MissingAPIKeyError(
                f"environment variable {self.config.api_key_env} is not set"
            )
        return key

    def send(self, request: ChatRequest) -> str:
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        body = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self._backoff_base * 2 ** (attempt - 1)
                self._sleep(delay * (1 + random.random() * 0.25))
            self.attempts += 1
            try:
                resp = self._client.post(
                    url, json=body, headers=headers, timeout=self.config.request_timeout
                )
            except httpx.TransportError as exc:
                last = exc
                logger.warning("transport error on attempt %d: %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = HTTPStatusError(resp.status_code, resp.text)
                logger.warning("retryable HTTP %d on attempt %d", resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise HTTPStatusError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise HTTPStatusError(resp.status_code, f"malformed body: {exc}") from exc
        if isinstance(last, HTTPStatusError):
            raise last
        raise TransportError(
            f"{url} unreachable after {self.config.max_retries + 1} attempts: {last}"
        )


def prompt_key(user_prompt: str) -> str:
    return hashlib.sha256(user_prompt.encode("utf-8")).hexdigest()


@dataclass
class _Rule:
    role: str
    response: str | Callable[[ChatRequest], str]
    contains: str | None = None


class ScriptedProvider:
    """Deterministic provider for tests and offline runs.

    Lookup order for a request: an exact ``(role, sha256(user_prompt))``
    entry, then ``contains`` rules for the role in insertion order, then the
    role's fallback. Responses may be callables of the request; they must be
    pure for traces to stay reproducible.
    """

    def __init__(self) -> None:
        self._exact: dict[tuple[str, str], str | Callable[[ChatRequest], str]] = {}
        self._rules: list[_Rule] = []
        self._fallback: dict[str, str | Callable[[ChatRequest], str]] = {}

    def on(
        self,
        role: str,
        response: str | Callable[[ChatRequest], str] | dict | list,
        *,
        contains: str | None = None,
        prompt: str | None = None,
    ) -> ScriptedProvider:
        if not callable(response) and not isinstance(response, str):
            response = json.dumps(response)
        if prompt is not None:
            self._exact[(role, prompt_key(prompt))] = response
        elif contains is not None:
            self._rules.append(_Rule(role, response, contains))
        else:
            self._fallback[role] = response
        return self

    def send(self, request: ChatRequest) -> str:
        found = self._exact.get((request.role_tag, prompt_key(request.user_prompt)))
        if found is None:
            for rule in self._rules:
                if rule.role == request.role_tag and rule.contains in request.user_prompt:
                    found = rule.response
                    break
        if found is None:
            found = self._fallback.get(request.role_tag)
        if found is None:
            raise ScriptMissError(f"no scripted response for role {request.role_tag!r}")
        return found(request) if callable(found) else found

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> ScriptedProvider:
        """Build from ``{"rules": [{"role", "response", "contains"?, "prompt_sha256"?}]}``."""
        provider = cls()
        for i, rule in enumerate(doc.get("rules", [])):
            try:
                role, response = rule["role"], rule["response"]
            except (KeyError, TypeError):
                raise ValueError(f"rules[{i}] needs 'role' and 'response'") from None
            if not isinstance(response, str):
                response = json.dumps(response)
            if "prompt_sha256" in rule:
                provider._exact[(role, rule["prompt_sha256"])] = response
            else:
                provider.on(role, response, contains=rule.get("contains"))
        return provider


# Estimates are always multiples of 1/20 (1.1 and 0.35 per unit), so usage is
# accumulated in integer twentieths: totals are exact whatever the order.
_UNITS = 20


def _to_units(tokens: float) -> int:
    return round(tokens * _UNITS)


@dataclass
class Usage:
    calls: int = 0
    units_in: int = 0
    units_out: int = 0
    latency: float = 0.0

    @property
    def tokens_in(self) -> float:
        return self.units_in / _UNITS

    @property
    def tokens_out(self) -> float:
        return self.units_out / _UNITS

    @property
    def tokens(self) -> float:
        return (self.units_in + self.units_out) / _UNITS

    def add(self, resp: ChatResponse) -> None:
        self.calls += 1
        self.units_in += _to_units(resp.estimated_tokens_in)
        self.units_out += _to_units(resp.estimated_tokens_out)
        self.latency += resp.latency

    def __iadd__(self, other: Usage) -> Usage:
        self.calls += other.calls
        self.units_in += other.units_in
        self.units_out += other.units_out
        self.latency += other.latency
        return self

    def __sub__(self, other: Usage) -> Usage:
        return Usage(
            self.calls - other.calls,
            self.units_in - other.units_in,
            self.units_out - other.units_out,
            self.latency - other.latency,
        )

    def copy(self) -> Usage:
        return Usage(self.calls, self.units_in, self.units_out, self.latency)

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "calls": self.calls,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }
        if include_timing:
            out["latency"] = self.latency
        return out


@dataclass
class Gateway:
    """Wraps a provider with precondition checks and call/token accounting.

    Counters are updated under a lock, so one gateway can serve concurrent
    queries.
    """

    provider: Provider
    name: str = "main"
    usage: Usage = field(default_factory=Usage)
    by_role: dict[str, Usage] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def complete(self, request: ChatRequest) -> ChatResponse:
        if not request.system_prompt.strip() or not request.user_prompt.strip():
            raise PreconditionError("system and user prompts must be non-empty")
        start = time.perf_counter()
        text = self.provider.send(request)
        latency = time.perf_counter() - start
        resp = ChatResponse(
            text=text,
            estimated_tokens_in=estimate_tokens(request.system_prompt)
            + estimate_tokens(request.user_prompt),
            estimated_tokens_out=estimate_tokens(text),
            latency=latency,
        )
        with self._lock:
            self.usage.add(resp)
            self.by_role.setdefault(request.role_tag, Usage()).add(resp)
        return resp

    def reset(self) -> None:
        with self._lock:
            self.usage = Usage()
            self.by_role = {}


# -- structured output ---------------------------------------------------

Schema = Literal["keyword_list", "match_result", "selection", "answer_assessment"]

_FENCE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)


def _json_objects(text: str):
    """Yield every JSON object decodable from ``text``, fenced blocks first."""
    decoder = json.JSONDecoder()
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    for chunk in candidates:
        idx = chunk.find("{")
        while idx != -1:
            try:
                obj, _ = decoder.raw_decode(chunk, idx)
            except json.JSONDecodeError:
                pass
            else:
                if isinstance(obj, dict):
                    yield obj
            idx = chunk.find("{", idx + 1)


def _str_list(obj: dict, name: str, snippet: str) -> list[str]:
    if name not in obj:
        raise ParseError(f"missing field {name!r}", snippet)
    value = obj[name]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(f"field {name!r} must be a list of strings", snippet)
    return value


@dataclass(frozen=True)
class Assessment:
    answer: str
    sufficient: bool
    critical_ids: tuple[int, ...]


def parse_structured(text: str, schema: Schema) -> Any:
    """Extract the first JSON object in ``text`` and validate it against ``schema``.

    * ``keyword_list`` / ``selection``: ``{"keywords": [str, ...]}`` -> list
    * ``match_result``: ``{"matches": {raw: [vocab, ...] | vocab | null}}`` ->
      dict of raw keyword to list of vocabulary entries
    * ``answer_assessment``: ``{"answer", "sufficient", "critical_ids"}`` ->
      :class:`Assessment`
    """
    if not isinstance(text, str):
        raise ParseError("completion is not text")
    obj = next(_json_objects(text), None)
    if obj is None:
        raise ParseError("no JSON object found", text)
    snippet = json.dumps(obj)[:200]

    if schema in ("keyword_list", "selection"):
        return _str_list(obj, "keywords", snippet)

    if schema == "match_result":
        if "matches" not in obj:
            raise ParseError("missing field 'matches'", snippet)
        matches = obj["matches"]
        if not isinstance(matches, dict):
            raise ParseError("field 'matches' must be an object", snippet)
        out: dict[str, list[str]] = {}
        for raw, target in matches.items():
            if target is None:
                out[raw] = []
            elif isinstance(target, str):
                out[raw] = [target] if target.strip() else []
            elif isinstance(target, list) and all(isinstance(t, str) for t in target):
                out[raw] = list(target)
            else:
                raise ParseError(f"match for {raw!r} must be a string, list or null", snippet)
        return out

    if schema == "answer_assessment":
        for name in ("answer", "sufficient", "critical_ids"):
            if name not in obj:
                raise ParseError(f"missing field {name!r}", snippet)
        answer, sufficient, ids = obj["answer"], obj["sufficient"], obj["critical_ids"]
        if not isinstance(answer, str):
            raise ParseError("field 'answer' must be a string", snippet)
        if not isinstance(sufficient, bool):
            raise ParseError("field 'sufficient' must be a boolean", snippet)
        if not isinstance(ids, list):
            raise ParseError("field 'critical_ids' must be a list", snippet)
        parsed: list[int] = []
        for v in ids:
            if isinstance(v, bool):
                raise ParseError("field 'critical_ids' must hold integers", snippet)
            if isinstance(v, int):
                parsed.append(v)
            elif isinstance(v, str) and v.strip().strip("[]").isdigit():
                parsed.append(int(v.strip().strip("[]")))
            else:
                raise ParseError("field 'critical_ids' must hold integers", snippet)
        return Assessment(answer, sufficient, tuple(dict.fromkeys(parsed)))

    raise ParseError(f"unknown schema {schema!r}")
