"""Pipeline configuration: one YAML file, BRQUAL_* environment overrides.

Precedence is env > flag > file. Relative paths in the file resolve against
the config file's directory, so a fixture tree can be self-contained.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .gateway import GatewayConfig
from .prompts import default_catalog_dir
from .preprocess import default_rules_path

ENV_PREFIX = "BRQUAL_"

_DEFAULTS: dict[str, dict[str, Any]] = {
    "tracker": {"base_url": "", "project": "MC", "fixture_dir": None,
                "created_after": None, "max_results": 1000, "page_size": 100},
    "provider": {"mode": "replay", "cache_path": None, "chat_model": "gpt-4o-mini",
                 "embed_model": "text-embedding-ada-002", "embed_dim": None,
                 "rerank_mode": "lexical", "rerank_model": "cross-encoder-default",
                 "base_url": "https://api.openai.com/v1", "timeout": 30.0,
                 "retries": 3, "backoff": 0.5, "max_concurrency": 4,
                 "max_output_tokens": 1024},
    "preprocess": {"rules_path": None},
    "detect": {"model_path": None, "threshold": None},
    "rag": {"index_dir": None, "pool_size": 40, "keep": 15,
            "chunk_size": 1000, "overlap": 200},
    "improve": {"catalog_path": None, "token_budget": 8000},
    "eval": {"embeddings_path": None, "triples_path": None, "annotations_path": None},
    "sample": {"seed": 42, "total": 996},
    "paths": {"out_dir": "out", "labels": None, "knowledge": None},
}

_PATH_KEYS = {
    ("tracker", "fixture_dir"), ("provider", "cache_path"),
    ("preprocess", "rules_path"), ("detect", "model_path"),
    ("rag", "index_dir"), ("improve", "catalog_path"),
    ("eval", "embeddings_path"), ("eval", "triples_path"),
    ("eval", "annotations_path"), ("paths", "out_dir"),
    ("paths", "labels"), ("paths", "knowledge"),
}


@dataclass
class PipelineConfig:
    values: dict[str, dict[str, Any]]
    base_dir: Path

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    # -- derived paths ---------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.get("paths", "out_dir"))

    def artifact(self, name: str) -> Path:
        return self.out_dir / name

    @property
    def corpus_path(self) -> Path:
        return self.artifact("corpus.jsonl")

    @property
    def sample_path(self) -> Path:
        return self.artifact("sample.jsonl")

    @property
    def sample_manifest_path(self) -> Path:
        return self.artifact("sample_manifest.jsonl")

    @property
    def preprocessed_path(self) -> Path:
        return self.artifact("preprocessed.jsonl")

    @property
    def preprocess_warnings_path(self) -> Path:
        return self.artifact("preprocess_warnings.jsonl")

    @property
    def detections_path(self) -> Path:
        return self.artifact("detections.jsonl")

    @property
    def improved_path(self) -> Path:
        return self.artifact("improved.jsonl")

    @property
    def eval_dir(self) -> Path:
        return self.artifact("eval")

    @property
    def ablation_dir(self) -> Path:
        return self.artifact("ablation")

    @property
    def rules_path(self) -> Path:
        return Path(self.get("preprocess", "rules_path") or default_rules_path())

    @property
    def catalog_path(self) -> Path:
        return Path(self.get("improve", "catalog_path") or default_catalog_dir())

    def gateway_config(self) -> GatewayConfig:
        p = self.values["provider"]
        return GatewayConfig(
            mode=p["mode"], cache_path=p["cache_path"], chat_model=p["chat_model"],
            embed_model=p["embed_model"], embed_dim=p["embed_dim"],
            rerank_mode=p["rerank_mode"], rerank_model=p["rerank_model"],
            base_url=p["base_url"], api_key=os.environ.get("BRQUAL_API_KEY", ""),
            timeout=float(p["timeout"]), retries=int(p["retries"]),
            backoff=float(p["backoff"]), max_concurrency=int(p["max_concurrency"]),
            max_output_tokens=int(p["max_output_tokens"]))

    def validate(self) -> None:
        p = self.values["provider"]
        if p["mode"] not in ("live", "record", "replay"):
            raise ConfigError(f"provider.mode must be live/record/replay, got {p['mode']}")
        if p["rerank_mode"] not in ("remote", "lexical"):
            raise ConfigError(f"provider.rerank_mode must be remote/lexical")
        if p["mode"] in ("record", "replay") and not p["cache_path"]:
            raise ConfigError(f"provider.mode {p['mode']} requires provider.cache_path")
        if p["mode"] == "replay":
            cache = Path(p["cache_path"])
            if not cache.is_file():
                raise ConfigError(f"replay mode but cache file missing: {cache}")
        if not self.rules_path.is_file():
            raise ConfigError(f"rules file not found: {self.rules_path}")
        if not self.catalog_path.is_dir():
            raise ConfigError(f"prompt catalog not found: {self.catalog_path}")


def _merge(base: dict[str, dict[str, Any]], extra: Mapping[str, Any],
           origin: str) -> None:
    for section, mapping in extra.items():
        if section not in base:
            raise ConfigError(f"{origin}: unknown config section {section!r}")
        if mapping is None:
            continue
        if not isinstance(mapping, Mapping):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in mapping.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: unknown config key {section}.{key}")
            base[section][key] = value


def _env_overrides(env: Mapping[str, str]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX) or name in ("BRQUAL_API_KEY", "BRQUAL_CONFIG"):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        for section in _DEFAULTS:
            prefix = section + "_"
            if rest.startswith(prefix):
                key = rest[len(prefix):]
                if key in _DEFAULTS[section]:
                    out.setdefault(section, {})[key] = yaml.safe_load(raw)
                break
    return out


def load_config(path: str | Path | None,
                flag_overrides: Mapping[str, Mapping[str, Any]] | None = None,
                env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Load and merge configuration: file, then flags, then environment."""
    env = os.environ if env is None else env
    values = {section: dict(keys) for section, keys in _DEFAULTS.items()}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        base_dir = path.parent.resolve()
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: config root must be a mapping")
        _merge(values, loaded, str(path))
    if flag_overrides:
        _merge(values, flag_overrides, "<flags>")
    _merge(values, _env_overrides(env), "<env>")

    # resolve relative paths against the config file directory
    for section, key in _PATH_KEYS:
        value = values[section][key]
        if value:
            p = Path(value)
            if not p.is_absolute():
                values[section][key] = str((base_dir / p))
    return PipelineConfig(values=values, base_dir=base_dir)
