"""Clients for the four model roles (executor, curator, judge, annotator)
and the phrase embedder.

Providers speak the de-facto chat-completions JSON layout over HTTP, or
replay recorded fixtures keyed by a content hash of the request. Tool calls
are mapped into the wire shape consumed by curation_protocol
(``{"function_name": ..., "arguments": {...}}``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import httpx

from .curation_protocol import CurationDecision, op_to_dict

logger = logging.getLogger(__name__)

ROLES = ("executor", "curator", "judge", "annotator")


class GatewayError(Exception):
    pass


class ProviderUnreachable(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class FixtureMiss(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"no recorded response for {key}")
        self.key = key


class EmbedServiceUnreachable(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    pass


# --- chat plumbing -----------------------------------------------------------


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    tools: tuple[Mapping, ...] = ()
    temperature: float | None = None
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tool_calls: tuple[Any, ...] = ()
    finish_reason: str = "stop"

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "tool_calls": list(self.tool_calls),
            "finish_reason": self.finish_reason,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ChatResponse":
        return cls(
            text=data.get("text", ""),
            tool_calls=tuple(data.get("tool_calls", ())),
            finish_reason=data.get("finish_reason", "stop"),
        )


def chat_request(*messages: tuple[str, str], tools: Sequence[Mapping] = ()) -> ChatRequest:
    """Build a request from (role, content) pairs."""
    return ChatRequest(
        messages=tuple(ChatMessage(role=r, content=c) for r, c in messages),
        tools=tuple(tools),
    )


def request_hash(role: str, request: ChatRequest) -> str:
    """Replay key: role plus canonicalized message contents.

    Decoding parameters are deliberately excluded so fixtures capture
    semantics, not sampling settings.
    """
    payload = {
        "role": role,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Provider(Protocol):
    def complete(self, role: str, request: ChatRequest) -> ChatResponse: ...


def _wire_tool_calls(raw_calls: Iterable[Any]) -> tuple[dict, ...]:
    """Map chat-completions tool calls into the curation wire shape.

    Argument strings are decoded to JSON objects where possible; strings
    that fail to decode are passed through, letting the decision parser
    count them as malformed calls instead of failing the whole response.
    """
    calls = []
    for item in raw_calls:
        if not isinstance(item, Mapping):
            calls.append({"function_name": None, "arguments": None})
            continue
        fn = item.get("function", item)
        name = fn.get("name") if isinstance(fn, Mapping) else None
        args = fn.get("arguments") if isinstance(fn, Mapping) else None
        if isinstance(args, str):
            try:
                args = json.loads(args)
            except json.JSONDecodeError:
                pass
        calls.append({"function_name": name, "arguments": args})
    return tuple(calls)


class HttpProvider:
    """Chat-completions client for one endpoint, with timeout and retry."""

    def __init__(
        self,
        base_url: str,
        model: str = "",
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 2,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.retries = retries
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def complete(self, role: str, request: ChatRequest) -> ChatResponse:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        }
        if request.tools:
            body["tools"] = list(request.tools)
        if request.temperature is not None:
            body["temperature"] = request.temperature
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens

        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                reply = self._client.post(url, json=body)
                reply.raise_for_status()
                return self._parse(reply.json())
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last_error = exc
                logger.warning("provider call failed (attempt %d): %s", attempt + 1, exc)
        raise ProviderUnreachable(f"{url}: {last_error}") from last_error

    @staticmethod
    def _parse(payload: Any) -> ChatResponse:
        try:
            choice = payload["choices"][0]
            message = choice["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat completion payload: {exc}") from exc
        return ChatResponse(
            text=message.get("content") or "",
            tool_calls=_wire_tool_calls(message.get("tool_calls") or ()),
            finish_reason=choice.get("finish_reason") or "stop",
        )


class ReplayProvider:
    """Deterministic provider backed by recorded (role, request hash) fixtures."""

    def __init__(self, entries: Iterable[Mapping] = ()):
        self._responses: dict[tuple[str, str], ChatResponse] = {}
        for entry in entries:
            key = (entry["role"], entry["request_hash"])
            self._responses[key] = ChatResponse.from_dict(entry["response"])

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ReplayProvider":
        entries = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    entries.append(json.loads(line))
        return cls(entries)

    def complete(self, role: str, request: ChatRequest) -> ChatResponse:
        key = (role, request_hash(role, request))
        try:
            return self._responses[key]
        except KeyError:
            raise FixtureMiss(f"role={key[0]} hash={key[1]}") from None


class ScriptedProvider:
    """Pops canned responses per role, optionally cycling; test workhorse."""

    def __init__(self, scripts: Mapping[str, Sequence[ChatResponse]], cycle: bool = False):
        self._scripts = {role: list(items) for role, items in scripts.items()}
        self._cursor = {role: 0 for role in self._scripts}
        self.cycle = cycle

    def complete(self, role: str, request: ChatRequest) -> ChatResponse:
        script = self._scripts.get(role)
        if not script:
            raise FixtureMiss(f"role={role} (no script)")
        i = self._cursor[role]
        if not self.cycle and i >= len(script):
            raise FixtureMiss(f"role={role} (script exhausted after {len(script)} calls)")
        self._cursor[role] = i + 1
        return script[i % len(script)]


class RecordingProvider:
    """Wraps a provider and records fixture entries for later replay."""

    def __init__(self, inner: Provider):
        self.inner = inner
        self.entries: list[dict] = []

    def complete(self, role: str, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(role, request)
        self.entries.append(fixture_entry(role, request, response))
        return response


def fixture_entry(role: str, request: ChatRequest, response: ChatResponse) -> dict:
    return {
        "role": role,
        "request_hash": request_hash(role, request),
        "request": {
            "messages": [{"role": m.role, "content": m.content} for m in request.messages]
        },
        "response": response.to_dict(),
    }


def write_fixtures(path: str | Path, entries: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for entry in entries:
            handle.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")


class Gateway:
    """Routes each model role to its configured provider."""

    def __init__(self, providers: Mapping[str, Provider]):
        self.providers = dict(providers)

    @classmethod
    def single(cls, provider: Provider, roles: Sequence[str] = ROLES) -> "Gateway":
        return cls({role: provider for role in roles})

    def complete(self, role: str, request: ChatRequest) -> ChatResponse:
        provider = self.providers.get(role)
        if provider is None:
            raise GatewayError(f"no provider configured for role {role!r}")
        return provider.complete(role, request)


# --- prompt templates --------------------------------------------------------


def load_prompt(name: str, prompts_dir: str | Path | None = None) -> str:
    """Load a prompt template by name; an override directory wins if set."""
    if prompts_dir is not None:
        return (Path(prompts_dir) / f"{name}.txt").read_text(encoding="utf-8")
    return resources.files("skillstream.prompts").joinpath(f"{name}.txt").read_text(
        encoding="utf-8"
    )


# --- judging ----------------------------------------------------------------

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")
_VERDICT_RE = re.compile(r"\b(SUCCESS|FAILURE)\b", re.IGNORECASE)


def parse_judge_value(text: str) -> float | None:
    """First number in the reply; integers read on the 1-5 scale, decimals on [0,1]."""
    match = _NUMBER_RE.search(text)
    if not match:
        return None
    token = match.group(0)
    if "." in token:
        value = float(token)
        return value if 0.0 <= value <= 1.0 else None
    whole = int(token)
    if 1 <= whole <= 5:
        return (whole - 1) / 4
    if whole == 0:
        return 0.0
    return None


def judge_score(
    gateway: Gateway,
    operations: CurationDecision | str,
    trajectory_summary: str,
    prompts_dir: str | Path | None = None,
) -> float:
    """Score curated content in [0, 1]; one retry on parse failure, then 0.0.

    ``operations`` is a curation decision (rendered as an op list) or
    pre-rendered text.
    """
    if isinstance(operations, CurationDecision):
        operations = json.dumps(
            [op_to_dict(op) for op in operations.ops], ensure_ascii=False
        )
    template = load_prompt("judge_content", prompts_dir)
    request = chat_request(
        ("user", template.format(operations=operations, trajectory=trajectory_summary))
    )
    for _ in range(2):
        value = parse_judge_value(gateway.complete("judge", request).text)
        if value is not None:
            return value
    logger.warning("judge reply unparseable twice; scoring 0.0")
    return 0.0


def self_judge_success(
    gateway: Gateway,
    task_text: str,
    trajectory_text: str,
    flavor: str = "agentic",
    prompts_dir: str | Path | None = None,
) -> bool:
    """SUCCESS/FAILURE verdict from the frozen executor; garbage reads as failure."""
    template = load_prompt(f"judge_success_{flavor}", prompts_dir)
    request = chat_request(("user", template.format(task=task_text, trajectory=trajectory_text)))
    reply = gateway.complete("executor", request).text
    verdicts = _VERDICT_RE.findall(reply)
    return bool(verdicts) and verdicts[-1].upper() == "SUCCESS"


def annotate_task(
    gateway: Gateway, task_text: str, prompts_dir: str | Path | None = None
) -> dict:
    """Ask the annotator role for the five-list attribute JSON object."""
    template = load_prompt("annotator_system", prompts_dir)
    reply = gateway.complete("annotator", chat_request(("user", template.format(task=task_text))))
    text = reply.text
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise MalformedResponse("annotator reply contains no JSON object")
    try:
        data = json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise MalformedResponse(f"annotator reply is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedResponse("annotator reply is not a JSON object")
    return data


# --- embeddings --------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingBatch:
    phrases: tuple[str, ...]
    vectors: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if len(self.phrases) != len(self.vectors):
            raise DimensionMismatch("phrase and vector counts differ")
        for vec in self.vectors:
            norm = math.sqrt(sum(x * x for x in vec))
            if abs(norm - 1.0) > 1e-6:
                raise DimensionMismatch(f"vector norm {norm} is not within 1e-6 of 1")


class Embedder(Protocol):
    def embed(self, phrases: Sequence[str]) -> EmbeddingBatch: ...


class StubEmbedder:
    """Deterministic hash-seeded embedder for offline runs and tests.

    Distinct phrases map to independent pseudo-random unit vectors, so
    cross-phrase cosines concentrate near zero (far below any useful match
    threshold): fuzzy matching degenerates to exact matching.
    """

    def __init__(self, dim: int = 384, tag: str = "stub"):
        self.dim = dim
        self.tag = tag
        self._cache: dict[str, tuple[float, ...]] = {}

    def _vector(self, phrase: str) -> tuple[float, ...]:
        cached = self._cache.get(phrase)
        if cached is not None:
            return cached
        seed = int.from_bytes(
            hashlib.sha256(f"{self.tag}\x00{phrase}".encode("utf-8")).digest()[:8], "big"
        )
        rng = random.Random(seed)
        raw = [rng.gauss(0.0, 1.0) for _ in range(self.dim)]
        norm = math.sqrt(sum(x * x for x in raw))
        vec = tuple(x / norm for x in raw)
        self._cache[phrase] = vec
        return vec

    def embed(self, phrases: Sequence[str]) -> EmbeddingBatch:
        return EmbeddingBatch(
            phrases=tuple(phrases), vectors=tuple(self._vector(p) for p in phrases)
        )


class HttpEmbedder:
    """Client for the sidecar embedding service (POST /embed)."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(timeout=timeout)

    def embed(self, phrases: Sequence[str]) -> EmbeddingBatch:
        try:
            reply = self._client.post(f"{self.base_url}/embed", json={"phrases": list(phrases)})
            reply.raise_for_status()
            payload = reply.json()
        except httpx.TransportError as exc:
            raise EmbedServiceUnreachable(f"{self.base_url}: {exc}") from exc
        except httpx.HTTPStatusError as exc:
            raise EmbedServiceUnreachable(f"{self.base_url}: {exc}") from exc
        vectors = payload.get("vectors")
        dim = payload.get("dim")
        if not isinstance(vectors, list) or len(vectors) != len(phrases):
            raise DimensionMismatch("embed service returned a mismatched vector list")
        if dim is not None and any(len(v) != dim for v in vectors):
            raise DimensionMismatch("embed service vectors disagree with advertised dim")
        return EmbeddingBatch(
            phrases=tuple(phrases), vectors=tuple(tuple(float(x) for x in v) for v in vectors)
        )


class CachingEmbedder:
    """Per-phrase memo in front of any embedder; safe because embeddings are
    idempotent per phrase within one provider configuration."""

    def __init__(self, inner: Embedder):
        self.inner = inner
        self._cache: dict[str, tuple[float, ...]] = {}

    def embed(self, phrases: Sequence[str]) -> EmbeddingBatch:
        missing = [p for p in dict.fromkeys(phrases) if p not in self._cache]
        if missing:
            batch = self.inner.embed(missing)
            for phrase, vector in zip(batch.phrases, batch.vectors):
                self._cache[phrase] = vector
        return EmbeddingBatch(
            phrases=tuple(phrases), vectors=tuple(self._cache[p] for p in phrases)
        )
