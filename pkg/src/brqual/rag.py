"""Local vector knowledge base and the retrieval funnel.

The store is exact brute-force cosine over the whole index: wiki-scale
corpora are small enough that exactness beats approximate structures, and
it makes the top-k contract directly testable. The funnel is: LLM query
generation -> broad candidate retrieval (pool of 40) -> cross-encoder or
lexical re-rank -> top 15 in descending relevance.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, ProviderError, TransportError
from .gateway import (ChatRequest, ProviderGateway, RerankRequest,
                      lexical_rerank_scores)
from .model import dump_json, read_jsonl
from .prompts import PromptCatalog

logger = logging.getLogger(__name__)

QUERYGEN_PROMPT_ID = "rag.querygen.v1"
DEFAULT_POOL_SIZE = 40
DEFAULT_KEEP = 15
DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 200
MAX_QUERIES = 5
INDEX_VERSION = 1


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    source_title: str
    source_url: str
    text: str
    embedding: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"chunk_id": self.chunk_id, "source_title": self.source_title,
                "source_url": self.source_url, "text": self.text,
                "embedding": list(self.embedding)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KnowledgeChunk":
        return cls(chunk_id=d["chunk_id"], source_title=d["source_title"],
                   source_url=d["source_url"], text=d["text"],
                   embedding=tuple(d["embedding"]))


@dataclass
class VectorIndex:
    chunks: list[KnowledgeChunk]
    dimension: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [c.chunk_id for c in self.chunks]
        if len(ids) != len(set(ids)):
            raise ValueError("chunk_ids must be unique")
        for c in self.chunks:
            if len(c.embedding) != self.dimension:
                raise ValueError(f"chunk {c.chunk_id} has dimension "
                                 f"{len(c.embedding)}, index is {self.dimension}")
        self._by_id = {c.chunk_id: c for c in self.chunks}
        self._matrix = (np.array([c.embedding for c in self.chunks])
                        if self.chunks else np.zeros((0, self.dimension)))
        norms = np.linalg.norm(self._matrix, axis=1)
        norms[norms == 0] = 1.0
        self._norms = norms

    def __len__(self) -> int:
        return len(self.chunks)

    def chunk(self, chunk_id: str) -> KnowledgeChunk:
        return self._by_id[chunk_id]

    def cosine_similarities(self, query: Sequence[float]) -> np.ndarray:
        q = np.asarray(query, dtype=float)
        qn = np.linalg.norm(q)
        if qn == 0:
            return np.zeros(len(self.chunks))
        return (self._matrix @ q) / (self._norms * qn)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"version": INDEX_VERSION, "dimension": self.dimension,
                    "chunk_count": len(self.chunks), "metadata": self.metadata}
        (directory / "manifest.json").write_text(dump_json(manifest) + "\n",
                                                 encoding="utf-8")
        with open(directory / "embeddings.jsonl", "w", encoding="utf-8") as fh:
            for chunk in self.chunks:
                fh.write(dump_json(chunk.to_dict()) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "VectorIndex":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise ConfigError(f"index manifest not found: {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        chunks = [KnowledgeChunk.from_dict(row)
                  for row in read_jsonl(directory / "embeddings.jsonl")]
        return cls(chunks=chunks, dimension=manifest["dimension"],
                   metadata=manifest.get("metadata", {}))


def chunk_document(body: str, chunk_size: int = DEFAULT_CHUNK_SIZE,
                   overlap: int = DEFAULT_OVERLAP) -> list[str]:
    """Split a body into ~chunk_size character pieces overlapping ~overlap,
    snapping both boundaries back/forward to whitespace so words stay whole."""
    if chunk_size <= 0 or overlap < 0 or overlap >= chunk_size:
        raise ValueError("need chunk_size > 0 and 0 <= overlap < chunk_size")
    body = body.strip()
    if not body:
        return []
    chunks: list[str] = []
    start = 0
    while start < len(body):
        end = start + chunk_size
        if end >= len(body):
            piece = body[start:].strip()
            if piece:
                chunks.append(piece)
            break
        window = body[start:end]
        cut = window.rfind(" ")
        if cut <= 0:
            cut = len(window)
        end = start + cut
        piece = body[start:end].strip()
        if piece:
            chunks.append(piece)
        next_start = end - overlap
        if next_start <= start:
            next_start = start + 1
        # advance to the next word boundary so chunks start on whole words
        while next_start < len(body) and not body[next_start - 1].isspace():
            next_start += 1
        start = next_start
    return chunks


def ingest_knowledge(documents: Sequence[dict[str, str]], gateway: ProviderGateway,
                     chunk_size: int = DEFAULT_CHUNK_SIZE,
                     overlap: int = DEFAULT_OVERLAP,
                     index_dir: str | Path | None = None,
                     built_at: str = "") -> VectorIndex:
    """Chunk, embed, and index {title, url, body} documents.

    Empty documents are skipped with a warning. chunk_id is a stable hash
    of (source_id, ordinal); the source_id folds in the document's position
    so identical (title, url) pairs cannot collide.
    """
    if not documents:
        raise ValueError("documents must be non-empty")
    chunks_meta: list[tuple[str, str, str, str]] = []  # (chunk_id, title, url, text)
    for doc_idx, doc in enumerate(documents):
        body = (doc.get("body") or "").strip()
        title = doc.get("title", "")
        url = doc.get("url", "")
        if not body:
            logger.warning("skipping empty document %r", title)
            continue
        source_id = hashlib.sha256(f"{title}\x00{url}\x00{doc_idx}".encode()).hexdigest()[:12]
        for ordinal, text in enumerate(chunk_document(body, chunk_size, overlap)):
            chunk_id = hashlib.sha256(f"{source_id}:{ordinal}".encode()).hexdigest()[:16]
            chunks_meta.append((chunk_id, title, url, text))
    if not chunks_meta:
        raise ValueError("no non-empty documents to index")

    vectors = gateway.embed([text for _, _, _, text in chunks_meta])
    dimension = vectors[0].dimension
    chunks = [KnowledgeChunk(chunk_id=cid, source_title=title, source_url=url,
                             text=text, embedding=v.values)
              for (cid, title, url, text), v in zip(chunks_meta, vectors)]
    index = VectorIndex(chunks=chunks, dimension=dimension,
                        metadata={"built_at": built_at,
                                  "embed_model": gateway.config.embed_model,
                                  "chunk_size": chunk_size, "overlap": overlap})
    if index_dir is not None:
        index.save(index_dir)
    return index


def parse_query_completion(completion: str) -> list[str]:
    """Non-empty lines, enumeration markers stripped, deduped, capped at 5."""
    queries: list[str] = []
    seen = set()
    for line in completion.splitlines():
        text = line.strip()
        text = text.lstrip("-*• ").strip()
        text = text.lstrip("0123456789.) ").strip()
        if text and text.lower() not in seen:
            seen.add(text.lower())
            queries.append(text)
        if len(queries) >= MAX_QUERIES:
            break
    return queries


def generate_queries(summary: str, description: str, gateway: ProviderGateway,
                     catalog: PromptCatalog) -> list[str]:
    """LLM-driven multi-query generation with a deterministic fallback.

    Parse failures fall back to [summary], or to the first 120 characters
    of the description when the summary is empty.
    """
    fallback = [summary.strip()] if summary.strip() else [description.strip()[:120]]
    prompt = catalog.utility(QUERYGEN_PROMPT_ID)
    request = ChatRequest(prompt_id=QUERYGEN_PROMPT_ID,
                          system_text=prompt.system_text,
                          user_text=prompt.render(summary=summary, description=description),
                          max_output_tokens=gateway.config.max_output_tokens)
    try:
        completion = gateway.chat(request)
    except ProviderError as exc:
        logger.warning("query generation failed (%s); falling back to summary", exc)
        return fallback
    queries = parse_query_completion(completion)
    if not queries:
        logger.warning("query completion unparseable; falling back to summary")
        return fallback
    return queries


@dataclass(frozen=True)
class RetrievalResult:
    queries: tuple[str, ...]
    candidates: tuple[dict[str, Any], ...]  # {chunk_id, similarity}
    selected: tuple[dict[str, Any], ...]    # {chunk_id, rerank_score}

    def selected_ids(self) -> list[str]:
        return [s["chunk_id"] for s in self.selected]

    def to_dict(self) -> dict[str, Any]:
        return {"queries": list(self.queries),
                "candidates": [dict(c) for c in self.candidates],
                "selected": [dict(s) for s in self.selected]}


def retrieve_candidates(index: VectorIndex, queries: Sequence[str],
                        gateway: ProviderGateway,
                        pool_size: int = DEFAULT_POOL_SIZE) -> list[dict[str, Any]]:
    """Embed each query, merge per-chunk max similarity, keep the top pool.

    Ties break by chunk_id ascending so retrieval is replay-deterministic.
    """
    if len(index) == 0:
        raise ValueError("index is empty")
    if not queries:
        raise ValueError("queries must be non-empty")
    vectors = gateway.embed(list(queries))
    best: dict[str, float] = {}
    for vec in vectors:
        sims = index.cosine_similarities(vec.values)
        for chunk, sim in zip(index.chunks, sims):
            value = float(sim)
            if chunk.chunk_id not in best or value > best[chunk.chunk_id]:
                best[chunk.chunk_id] = value
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return [{"chunk_id": cid, "similarity": sim} for cid, sim in ranked[:pool_size]]


def rerank_and_select(index: VectorIndex, candidates: Sequence[dict[str, Any]],
                      report_text: str, gateway: ProviderGateway,
                      keep: int = DEFAULT_KEEP) -> list[dict[str, Any]]:
    """Re-rank the candidate pool against the original report text.

    Returns at most `keep` entries sorted by score descending; ties break
    by prior similarity then chunk_id. A remote re-ranker failure falls
    back to the lexical scorer and is logged.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    texts = [index.chunk(c["chunk_id"]).text for c in candidates]
    try:
        scores = gateway.rerank(RerankRequest(query_text=report_text,
                                              candidate_texts=tuple(texts)))
    except ProviderError as exc:
        logger.warning("remote rerank failed (%s); using lexical fallback", exc)
        scores = lexical_rerank_scores(report_text, texts)
    order = sorted(range(len(candidates)),
                   key=lambda i: (-scores[i], -candidates[i]["similarity"],
                                  candidates[i]["chunk_id"]))
    return [{"chunk_id": candidates[i]["chunk_id"], "rerank_score": float(scores[i])}
            for i in order[:keep]]


def run_retrieval(index: VectorIndex, summary: str, description: str,
                  gateway: ProviderGateway, catalog: PromptCatalog,
                  pool_size: int = DEFAULT_POOL_SIZE,
                  keep: int = DEFAULT_KEEP) -> RetrievalResult:
    """The full funnel for one report."""
    queries = generate_queries(summary, description, gateway, catalog)
    candidates = retrieve_candidates(index, queries, gateway, pool_size)
    report_text = f"{summary}\n{description}".strip()
    selected = rerank_and_select(index, candidates, report_text, gateway, keep)
    return RetrievalResult(queries=tuple(queries),
                           candidates=tuple(candidates),
                           selected=tuple(selected))
