import pytest
import yaml

from brqual.config import load_config
from brqual.errors import ConfigError


def _write(tmp_path, doc):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_defaults_without_file():
    cfg = load_config(None, env={})
    assert cfg.get("provider", "mode") == "replay"
    assert cfg.get("rag", "pool_size") == 40
    assert cfg.get("rag", "keep") == 15
    assert cfg.get("rag", "chunk_size") == 1000
    assert cfg.get("rag", "overlap") == 200


def test_file_values_loaded(tmp_path):
    path = _write(tmp_path, {"sample": {"seed": 9, "total": 50}})
    cfg = load_config(path, env={})
    assert cfg.get("sample", "seed") == 9
    assert cfg.get("sample", "total") == 50


def test_precedence_env_beats_flag_beats_file(tmp_path):
    path = _write(tmp_path, {"sample": {"seed": 1}})
    cfg = load_config(path, flag_overrides={"sample": {"seed": 2}}, env={})
    assert cfg.get("sample", "seed") == 2
    cfg = load_config(path, flag_overrides={"sample": {"seed": 2}},
                      env={"BRQUAL_SAMPLE_SEED": "3"})
    assert cfg.get("sample", "seed") == 3


def test_env_values_parse_as_yaml_scalars(tmp_path):
    cfg = load_config(None, env={"BRQUAL_PROVIDER_EMBED_DIM": "24",
                                 "BRQUAL_PROVIDER_MODE": "record"})
    assert cfg.get("provider", "embed_dim") == 24
    assert cfg.get("provider", "mode") == "record"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"nonsense": {"a": 1}}), env={})
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"sample": {"bogus": 1}}), env={})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "tree"
    sub.mkdir()
    path = sub / "config.yaml"
    path.write_text(yaml.safe_dump({"paths": {"out_dir": "out"},
                                    "detect": {"model_path": "model.json"}}))
    cfg = load_config(path, env={})
    assert cfg.out_dir == sub / "out"
    assert cfg.get("detect", "model_path") == str(sub / "model.json")


def test_validation_catches_bad_modes_and_missing_cache(tmp_path):
    cfg = load_config(_write(tmp_path, {"provider": {"mode": "record"}}), env={})
    with pytest.raises(ConfigError, match="cache_path"):
        cfg.validate()
    cfg = load_config(_write(tmp_path, {"provider": {"mode": "replay",
                                                     "cache_path": "absent.jsonl"}}),
                      env={})
    with pytest.raises(ConfigError, match="cache file missing"):
        cfg.validate()
    cfg = load_config(_write(tmp_path, {"provider": {"rerank_mode": "sideways"}}),
                      env={})
    with pytest.raises(ConfigError, match="rerank_mode"):
        cfg.validate()
