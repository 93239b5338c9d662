"""Single abstraction over external model services (chat, embeddings, re-ranking).

Every request is canonicalized and content-hashed; in record mode responses
are appended to a JSONL cache, and in replay mode they are served back from
that cache so the whole pipeline runs offline and byte-identically. The
gateway is safe to call from multiple worker threads: cache writes go
through one lock, and a semaphore caps in-flight live requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Protocol

from .errors import (AuthError, CacheMiss, ConfigError, DimensionMismatch,
                     RateLimited, TransportError)
from .textutil import collapse_ws, tokenize

logger = logging.getLogger(__name__)

MODE_LIVE = "live"
MODE_RECORD = "record"
MODE_REPLAY = "replay"

RERANK_REMOTE = "remote"
RERANK_LEXICAL = "lexical"


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion request; prompt_id identifies the template used."""

    prompt_id: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.prompt_id:
            raise ValueError("prompt_id must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dimension(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RerankRequest:
    query_text: str
    candidate_texts: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.candidate_texts:
            raise ValueError("candidate_texts must be non-empty")


@dataclass(frozen=True)
class CacheEntry:
    """One recorded exchange. request_body keeps the canonical request so
    prompt streams can be audited offline from the cache alone."""

    request_hash: str
    request_body: str
    response_body: str
    recorded_at: str

    def to_dict(self) -> dict[str, Any]:
        return {"request_hash": self.request_hash, "request_body": self.request_body,
                "response_body": self.response_body, "recorded_at": self.recorded_at}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CacheEntry":
        return cls(request_hash=d["request_hash"], request_body=d.get("request_body", ""),
                   response_body=d["response_body"], recorded_at=d["recorded_at"])


def _collapse_strings(value: Any) -> Any:
    if isinstance(value, str):
        return collapse_ws(value)
    if isinstance(value, list):
        return [_collapse_strings(v) for v in value]
    if isinstance(value, dict):
        return {k: _collapse_strings(v) for k, v in value.items()}
    return value


def canonical_request(kind: str, payload: dict[str, Any]) -> str:
    """Key-sorted JSON with whitespace runs collapsed inside every string.

    Semantically identical requests (field order, insignificant whitespace)
    canonicalize to the same text and therefore the same hash.
    """
    body = dict(payload)
    body["kind"] = kind
    return json.dumps(_collapse_strings(body), sort_keys=True, ensure_ascii=False)


def request_hash(canonical: str) -> str:
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def lexical_rerank_scores(query_text: str, candidate_texts: list[str] | tuple[str, ...]) -> list[float]:
    """Deterministic offline re-ranker: token-overlap cosine.

    Token-count vectors over lowercased alphanumeric tokens; a candidate
    identical to the query scores 1.0, candidates sharing no terms score 0.
    """
    from collections import Counter

    q = Counter(tokenize(query_text))
    qn = math.sqrt(sum(v * v for v in q.values()))
    scores: list[float] = []
    for cand in candidate_texts:
        c = Counter(tokenize(cand))
        cn = math.sqrt(sum(v * v for v in c.values()))
        if qn == 0 or cn == 0:
            scores.append(0.0)
            continue
        dot = sum(v * c[t] for t, v in q.items())
        scores.append(dot / (qn * cn))
    return scores


class Transport(Protocol):
    """Live side of the gateway. Implementations raise TransportError,
    RateLimited, or AuthError on failure."""

    def chat(self, body: dict[str, Any]) -> str: ...

    def embed(self, model: str, texts: list[str]) -> list[list[float]]: ...

    def rerank(self, model: str, query: str, candidates: list[str]) -> list[float]: ...


class HttpTransport:
    """OpenAI-compatible JSON-over-HTTPS client with bearer-token auth."""

    def __init__(self, base_url: str, api_key: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        import requests

        url = f"{self.base_url}{path}"
        headers = {"Authorization": f"Bearer {self.api_key}",
                   "Content-Type": "application/json"}
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"POST {path}: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimited(f"POST {path}: rate limited")
        if resp.status_code in (401, 403):
            raise AuthError(f"POST {path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"POST {path}: HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"POST {path}: non-JSON response") from exc

    def chat(self, body: dict[str, Any]) -> str:
        payload = {
            "model": body["model"],
            "messages": [
                {"role": "system", "content": body["system"]},
                {"role": "user", "content": body["user"]},
            ],
            "temperature": body["temperature"],
            "max_tokens": body["max_output_tokens"],
        }
        data = self._post("/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("chat response missing choices[0].message.content") from exc

    def embed(self, model: str, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model, "input": texts})
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            return [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError("embeddings response malformed") from exc

    def rerank(self, model: str, query: str, candidates: list[str]) -> list[float]:
        data = self._post("/rerank", {"model": model, "query": query,
                                      "documents": candidates})
        try:
            rows = sorted(data["results"], key=lambda r: r["index"])
            return [float(r["relevance_score"]) for r in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError("rerank response malformed") from exc


class ReplayCache:
    """Append-only JSONL cache of CacheEntry records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        if self.path.exists():
            from .model import read_jsonl

            for row in read_jsonl(self.path):
                entry = CacheEntry.from_dict(row)
                self._entries.setdefault(entry.request_hash, entry)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> CacheEntry | None:
        return self._entries.get(key)

    def entries(self) -> list[CacheEntry]:
        return list(self._entries.values())

    def append(self, entry: CacheEntry) -> None:
        """Persist a new entry; existing hashes are never rewritten."""
        with self._lock:
            if entry.request_hash in self._entries:
                return
            self._entries[entry.request_hash] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            from .model import dump_json

            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(dump_json(entry.to_dict()) + "\n")


@dataclass
class GatewayConfig:
    mode: str = MODE_REPLAY
    cache_path: str | None = None
    chat_model: str = "gpt-4o-mini"
    embed_model: str = "text-embedding-ada-002"
    embed_dim: int | None = None
    rerank_mode: str = RERANK_LEXICAL
    rerank_model: str = "cross-encoder-default"
    base_url: str = "https://api.openai.com/v1"
    api_key: str = ""
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_concurrency: int = 4
    max_output_tokens: int = 1024


@dataclass
class CallRecord:
    kind: str
    prompt_id: str
    request_hash: str
    cache_hit: bool


class ProviderGateway:
    """Front door for all provider calls, in live, record, or replay mode."""

    def __init__(self, config: GatewayConfig, transport: Transport | None = None,
                 clock: Callable[[], str] | None = None):
        if config.mode not in (MODE_LIVE, MODE_RECORD, MODE_REPLAY):
            raise ConfigError(f"unknown provider mode: {config.mode}")
        self.config = config
        self.cache: ReplayCache | None = None
        if config.mode in (MODE_RECORD, MODE_REPLAY):
            if not config.cache_path:
                raise ConfigError(f"provider mode {config.mode} requires provider.cache_path")
            self.cache = ReplayCache(config.cache_path)
        self._transport = transport
        if config.mode in (MODE_LIVE, MODE_RECORD) and transport is None:
            self._transport = HttpTransport(config.base_url, config.api_key, config.timeout)
        self._clock = clock or (lambda: datetime.now(timezone.utc)
                                .strftime("%Y-%m-%dT%H:%M:%SZ"))
        self._sem = threading.Semaphore(max(1, config.max_concurrency))
        self._log_lock = threading.Lock()
        self.call_log: list[CallRecord] = []

    # -- internals -----------------------------------------------------------

    def _record_call(self, kind: str, prompt_id: str, rhash: str, cache_hit: bool) -> None:
        with self._log_lock:
            self.call_log.append(CallRecord(kind, prompt_id, rhash, cache_hit))

    def _with_retries(self, fn: Callable[[], Any]) -> Any:
        delay = self.config.backoff
        last: Exception | None = None
        for attempt in range(self.config.retries):
            try:
                with self._sem:
                    return fn()
            except AuthError:
                raise
            except (TransportError, RateLimited) as exc:
                last = exc
                if attempt + 1 < self.config.retries:
                    time.sleep(delay)
                    delay *= 2
        assert last is not None
        raise last

    def _exchange(self, kind: str, prompt_id: str, payload: dict[str, Any],
                  live_call: Callable[[], str]) -> str:
        canonical = canonical_request(kind, payload)
        rhash = request_hash(canonical)
        if self.cache is not None:
            entry = self.cache.get(rhash)
            if entry is not None:
                self._record_call(kind, prompt_id, rhash, cache_hit=True)
                return entry.response_body
            if self.config.mode == MODE_REPLAY:
                self._record_call(kind, prompt_id, rhash, cache_hit=False)
                raise CacheMiss(f"replay cache has no entry for {kind} request {rhash[:12]}")
        self._record_call(kind, prompt_id, rhash, cache_hit=False)
        body = self._with_retries(live_call)
        if self.cache is not None:  # record mode
            self.cache.append(CacheEntry(request_hash=rhash, request_body=canonical,
                                         response_body=body, recorded_at=self._clock()))
        return body

    # -- operations ----------------------------------------------------------

    def chat(self, request: ChatRequest) -> str:
        """Return the completion text for a chat request."""
        payload = {
            "model": self.config.chat_model,
            "prompt_id": request.prompt_id,
            "system": request.system_text,
            "user": request.user_text,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
        }

        def live() -> str:
            assert self._transport is not None
            return self._transport.chat({
                "model": self.config.chat_model,
                "prompt_id": request.prompt_id,
                "system": request.system_text,
                "user": request.user_text,
                "temperature": request.temperature,
                "max_output_tokens": request.max_output_tokens,
            })

        return self._exchange("chat", request.prompt_id, payload, live)

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        """Embed texts, order- and length-preserving.

        Cache entries are stored per text, so replay works for any batching.
        """
        if not texts:
            raise ValueError("embed requires a non-empty input list")
        results: dict[int, EmbeddingVector] = {}
        pending: list[tuple[int, str]] = []
        for i, text in enumerate(texts):
            canonical = canonical_request("embed", {"model": self.config.embed_model,
                                                    "input": text})
            rhash = request_hash(canonical)
            if self.cache is not None:
                entry = self.cache.get(rhash)
                if entry is not None:
                    self._record_call("embed", "", rhash, cache_hit=True)
                    results[i] = self._parse_vector(entry.response_body)
                    continue
                if self.config.mode == MODE_REPLAY:
                    self._record_call("embed", "", rhash, cache_hit=False)
                    raise CacheMiss(f"replay cache has no embedding for request {rhash[:12]}")
            self._record_call("embed", "", rhash, cache_hit=False)
            pending.append((i, text))

        if pending:
            assert self._transport is not None
            batch = [t for _, t in pending]
            vectors = self._with_retries(
                lambda: self._transport.embed(self.config.embed_model, batch))
            if len(vectors) != len(batch):
                raise DimensionMismatch(
                    f"provider returned {len(vectors)} vectors for {len(batch)} texts")
            for (i, text), vec in zip(pending, vectors):
                body = json.dumps(vec)
                if self.cache is not None:
                    canonical = canonical_request("embed", {"model": self.config.embed_model,
                                                            "input": text})
                    self.cache.append(CacheEntry(request_hash=request_hash(canonical),
                                                 request_body=canonical,
                                                 response_body=body,
                                                 recorded_at=self._clock()))
                results[i] = self._parse_vector(body)
        return [results[i] for i in range(len(texts))]

    def _parse_vector(self, body: str) -> EmbeddingVector:
        values = tuple(float(v) for v in json.loads(body))
        if self.config.embed_dim is not None and len(values) != self.config.embed_dim:
            raise DimensionMismatch(
                f"expected dimension {self.config.embed_dim}, got {len(values)}")
        return EmbeddingVector(values=values)

    def rerank(self, request: RerankRequest) -> list[float]:
        """Score candidates against the query; higher means more relevant."""
        if self.config.rerank_mode == RERANK_LEXICAL:
            return lexical_rerank_scores(request.query_text, request.candidate_texts)
        payload = {
            "model": self.config.rerank_model,
            "query": request.query_text,
            "candidates": list(request.candidate_texts),
        }

        def live() -> str:
            assert self._transport is not None
            scores = self._transport.rerank(self.config.rerank_model,
                                            request.query_text,
                                            list(request.candidate_texts))
            if len(scores) != len(request.candidate_texts):
                raise TransportError("rerank returned wrong number of scores")
            return json.dumps(scores)

        body = self._exchange("rerank", "", payload, live)
        scores = [float(v) for v in json.loads(body)]
        if len(scores) != len(request.candidate_texts):
            raise TransportError("cached rerank entry has wrong number of scores")
        return scores
