import json
import shutil
from pathlib import Path

import pytest
import yaml

from brqual.cli import main
from brqual.model import read_jsonl
from tests.conftest import FIXTURES


def _run(args, capsys=None):
    return main(args)


@pytest.fixture()
def out_dir(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("BRQUAL_PATHS_OUT_DIR", str(out))
    return out


CFG = ["--config", str(FIXTURES / "config.yaml")]


def test_fetch_writes_corpus(out_dir):
    assert main(CFG + ["fetch"]) == 0
    rows = list(read_jsonl(out_dir / "corpus.jsonl"))
    assert len(rows) >= 30
    assert all("key" in r and "summary" in r for r in rows)


def test_dry_run_has_no_side_effects(out_dir, capsys):
    assert main(CFG + ["--dry-run", "fetch"]) == 0
    assert not out_dir.exists()
    assert "plan" in capsys.readouterr().out


def test_sample_command_manifest(out_dir):
    assert main(CFG + ["fetch"]) == 0
    assert main(CFG + ["--seed", "5", "sample"]) == 0
    manifest = list(read_jsonl(out_dir / "sample_manifest.jsonl"))
    header, rows = manifest[0], manifest[1:]
    assert header["seed"] == 5
    assert sum(s["sample_count"] for s in header["strata"]) == len(rows)
    sampled = list(read_jsonl(out_dir / "sample.jsonl"))
    assert len(sampled) == len(rows)


def test_upstream_missing_exit_code(out_dir):
    assert main(CFG + ["preprocess"]) == 2
    assert main(CFG + ["detect"]) == 2
    assert main(CFG + ["improve"]) == 2
    assert main(CFG + ["evaluate"]) == 2


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("provider:\n  mode: nonsense\n")
    assert main(["--config", str(bad), "fetch"]) == 1
    missing = tmp_path / "nope.yaml"
    assert main(["--config", str(missing), "fetch"]) == 1


def test_json_error_output(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("provider:\n  mode: nonsense\n")
    assert main(["--config", str(bad), "--json", "fetch"]) == 1
    err = capsys.readouterr().err
    payload = json.loads(err)
    assert payload["error"]["code"] == 1
    assert payload["error"]["kind"] == "ConfigError"


def test_provider_failure_exit_code(tmp_path, monkeypatch):
    # replay cache with no recorded embeddings -> CacheMiss -> exit 3;
    # preprocess instead degrades to the heuristic path by contract (exit 0)
    out = tmp_path / "out"
    monkeypatch.setenv("BRQUAL_PATHS_OUT_DIR", str(out))
    cfg = dict(yaml.safe_load((FIXTURES / "config.yaml").read_text()))
    cache = tmp_path / "empty-cache.jsonl"
    cache.write_text("")
    cfg["provider"]["cache_path"] = str(cache)
    cfg["tracker"]["fixture_dir"] = str(FIXTURES / "tracker")
    cfg["detect"] = {"model_path": str(FIXTURES / "model.json")}
    cfg["rag"] = {"index_dir": str(tmp_path / "kb")}
    cfg["paths"] = {"labels": str(FIXTURES / "labels.jsonl"),
                    "knowledge": str(FIXTURES / "knowledge.jsonl")}
    cfg["eval"] = {}
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(cfg))

    assert main(["--config", str(config_path), "build-kb"]) == 3
    assert main(["--config", str(config_path), "fetch"]) == 0
    assert main(["--config", str(config_path), "preprocess"]) == 0
    warnings = list(read_jsonl(out / "preprocess_warnings.jsonl"))
    assert warnings  # every degraded report left a warning record


def test_train_detector_command(out_dir, capsys, tmp_path, monkeypatch):
    cfg = dict(yaml.safe_load((FIXTURES / "config.yaml").read_text()))
    cfg["detect"]["model_path"] = str(tmp_path / "model.json")
    config_path = tmp_path / "config.yaml"
    # keep relative paths resolvable from the fixtures directory
    for key in ("cache_path",):
        cfg["provider"][key] = str(FIXTURES / cfg["provider"][key])
    cfg["tracker"]["fixture_dir"] = str(FIXTURES / "tracker")
    cfg["paths"]["labels"] = str(FIXTURES / "labels.jsonl")
    cfg["paths"]["knowledge"] = str(FIXTURES / "knowledge.jsonl")
    cfg["rag"]["index_dir"] = str(FIXTURES / "kb")
    cfg["eval"] = {k: str(FIXTURES / v) for k, v in cfg["eval"].items()}
    config_path.write_text(yaml.safe_dump(cfg))

    assert main(["--config", str(config_path), "train-detector"]) == 0
    assert (tmp_path / "model.json").is_file()
    assert "held-out accuracy" in capsys.readouterr().out


def test_build_kb_replay(out_dir, tmp_path, monkeypatch):
    # rebuilding the kb from the shipped cache must reproduce the shipped index
    cfg = dict(yaml.safe_load((FIXTURES / "config.yaml").read_text()))
    rebuilt = tmp_path / "kb"
    cfg["provider"]["cache_path"] = str(FIXTURES / "cache.jsonl")
    cfg["tracker"]["fixture_dir"] = str(FIXTURES / "tracker")
    cfg["rag"]["index_dir"] = str(rebuilt)
    cfg["paths"]["labels"] = str(FIXTURES / "labels.jsonl")
    cfg["paths"]["knowledge"] = str(FIXTURES / "knowledge.jsonl")
    cfg["detect"]["model_path"] = str(FIXTURES / "model.json")
    cfg["eval"] = {k: str(FIXTURES / v) for k, v in cfg["eval"].items()}
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(cfg))

    assert main(["--config", str(config_path), "build-kb"]) == 0
    original = (FIXTURES / "kb" / "embeddings.jsonl").read_text()
    assert (rebuilt / "embeddings.jsonl").read_text() == original


def test_full_pipeline_stage_composability(out_dir):
    for command in ("fetch", "preprocess", "detect", "improve", "evaluate"):
        assert main(CFG + [command]) == 0, command
    assert (out_dir / "eval" / "completeness.json").is_file()
    completeness = json.loads((out_dir / "eval" / "completeness.json").read_text())
    assert completeness["improved"]["complete"] >= 0.95
    assert (out_dir / "eval" / "similarity.txt").is_file()
    assert (out_dir / "eval" / "kappa.json").is_file()


def test_improve_ablation_flags(out_dir):
    assert main(CFG + ["fetch"]) == 0
    assert main(CFG + ["preprocess"]) == 0
    assert main(CFG + ["detect"]) == 0
    assert main(CFG + ["improve", "--no-rag"]) == 0
    rows = list(read_jsonl(out_dir / "improved.jsonl"))
    for row in rows:
        for record in row["records"]:
            assert record["ablation_config"] == {"rag": False, "detector": True,
                                                 "few_shot": True}
            assert record["retrieved_chunk_ids"] == []


def test_improve_pass_corpus_makes_zero_provider_calls(tmp_path, monkeypatch):
    # all-Pass detections + an EMPTY replay cache: any provider call would be
    # a CacheMiss, so a clean exit proves the no-op path made none
    out = tmp_path / "out"
    monkeypatch.setenv("BRQUAL_PATHS_OUT_DIR", str(out))
    assert main(CFG + ["fetch"]) == 0
    assert main(CFG + ["preprocess"]) == 0
    assert main(CFG + ["detect"]) == 0

    detections = list(read_jsonl(out / "detections.jsonl"))
    for row in detections:
        row.update(verdict="pass", flags=[], recommendations=[],
                   llm_invoked=False, classifier_score=0.0)
    from brqual.model import write_jsonl
    write_jsonl(out / "detections.jsonl", detections)

    empty_cache = tmp_path / "empty-cache.jsonl"
    empty_cache.write_text("")
    monkeypatch.setenv("BRQUAL_PROVIDER_CACHE_PATH", str(empty_cache))
    assert main(CFG + ["improve"]) == 0

    preprocessed = {r["key"]: r for r in read_jsonl(out / "preprocessed.jsonl")}
    improved = list(read_jsonl(out / "improved.jsonl"))
    assert len(improved) == len(preprocessed)
    for row in improved:
        assert row["records"] == []
        assert row["base"] == preprocessed[row["base"]["key"]]


def test_sample_prints_margin_of_error(out_dir, capsys):
    assert main(CFG + ["fetch"]) == 0
    assert main(CFG + ["sample"]) == 0
    assert "margin of error" in capsys.readouterr().out


def test_ablate_emits_four_corpora_and_comparison_table(out_dir):
    for command in ("fetch", "preprocess", "detect", "ablate"):
        assert main(CFG + [command]) == 0
    for variant in ("full", "no-rag", "no-detector", "no-fewshot"):
        assert (out_dir / "ablation" / variant / "improved.jsonl").is_file()
    comparison = json.loads((out_dir / "ablation" / "comparison.json").read_text())
    assert [v["variant"] for v in comparison["variants"]] == [
        "full", "no-rag", "no-detector", "no-fewshot"]
    assert all(v["executable"] == "(manual label required)"
               for v in comparison["variants"])
    table = (out_dir / "ablation" / "comparison.txt").read_text()
    assert "no-detector" in table and "Configuration" in table


def test_evaluate_without_optional_inputs(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("BRQUAL_PATHS_OUT_DIR", str(out))
    # drop the optional study inputs: completeness must still be produced
    monkeypatch.setenv("BRQUAL_EVAL_TRIPLES_PATH", "")
    monkeypatch.setenv("BRQUAL_EVAL_ANNOTATIONS_PATH", "")
    for command in ("fetch", "preprocess", "detect", "improve", "evaluate"):
        assert main(CFG + [command]) == 0
    assert (out / "eval" / "completeness.txt").is_file()
    assert not (out / "eval" / "similarity.json").exists()
    assert not (out / "eval" / "kappa.json").exists()
