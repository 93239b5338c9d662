"""Shared test fixtures: fixture-tree paths and gateway helpers."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from brqual.gateway import GatewayConfig, ProviderGateway
from brqual.ingest import FetchQuery, FixtureTracker, fetch_reports
from brqual.preprocess import ExtractionRules, default_rules_path
from brqual.prompts import PromptCatalog, default_catalog_dir

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
EMBED_DIM = 24


def pseudo_embedding(text: str, dim: int = EMBED_DIM) -> list[float]:
    # mirrors the embedding rule the fixture recorder used
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")
    vec = np.random.RandomState(seed).standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return [float(f"{v:.8f}") for v in vec]


class EmbedOnlyTransport:
    """Deterministic transport for tests that only need embeddings."""

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def chat(self, body):
        raise AssertionError("no chat expected in this test")

    def embed(self, model, texts):
        return [pseudo_embedding(t, self.dim) for t in texts]

    def rerank(self, model, query, candidates):
        raise AssertionError("no remote rerank expected in this test")


class ScriptedChatTransport:
    """Returns canned completions keyed by a substring of the user text,
    falling back to a default."""

    def __init__(self, responses=None, default="", dim: int = EMBED_DIM):
        self.responses = responses or {}
        self.default = default
        self.dim = dim
        self.chat_calls: list[dict] = []

    def chat(self, body):
        self.chat_calls.append(body)
        for marker, completion in self.responses.items():
            if marker in body["user"]:
                return completion
        return self.default

    def embed(self, model, texts):
        return [pseudo_embedding(t, self.dim) for t in texts]

    def rerank(self, model, query, candidates):
        raise AssertionError("no remote rerank expected in this test")


@pytest.fixture(scope="session")
def rules() -> ExtractionRules:
    return ExtractionRules.load(default_rules_path())


@pytest.fixture(scope="session")
def catalog() -> PromptCatalog:
    return PromptCatalog(default_catalog_dir())


@pytest.fixture(scope="session")
def fixture_corpus():
    query = FetchQuery(project_key="MCFX", max_results=100)
    return fetch_reports(query, FixtureTracker(FIXTURES / "tracker"))


@pytest.fixture()
def replay_gateway() -> ProviderGateway:
    config = GatewayConfig(mode="replay", cache_path=str(FIXTURES / "cache.jsonl"),
                           embed_dim=EMBED_DIM, rerank_mode="lexical")
    return ProviderGateway(config)


def record_gateway(tmp_path: Path, transport, name: str = "cache.jsonl",
                   **overrides) -> ProviderGateway:
    config = GatewayConfig(mode="record", cache_path=str(tmp_path / name),
                           backoff=0.001, **overrides)
    return ProviderGateway(config, transport=transport,
                           clock=lambda: "2025-08-01T00:00:00Z")


@pytest.fixture(autouse=True)
def _clean_brqual_env(monkeypatch):
    # config loading reads BRQUAL_*; keep the ambient environment out of tests
    import os

    for name in list(os.environ):
        if name.startswith("BRQUAL_"):
            monkeypatch.delenv(name, raising=False)
