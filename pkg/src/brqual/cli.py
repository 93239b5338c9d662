"""brqual: operator front end for the five-stage pipeline.

Commands: fetch, sample, preprocess, detect, improve, evaluate, ablate,
train-detector, build-kb. Exit codes: 0 success, 1 config error, 2 upstream
artifact missing, 3 provider failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

from . import detect as detect_mod
from . import evaluate as eval_mod
from . import improve as improve_mod
from . import ingest, rag
from .config import PipelineConfig, load_config
from .errors import (BrqualError, ConfigError, ProviderError, SchemaError,
                     UpstreamMissing)
from .gateway import ProviderGateway
from .model import (DetectionResult, RawBugReport, StructuredReport, dump_json,
                    read_jsonl, write_jsonl)
from .preprocess import ExtractionRules, preprocess_report
from .prompts import PromptCatalog

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UPSTREAM = 2
EXIT_PROVIDER = 3

ABLATION_VARIANTS = (
    ("full", improve_mod.AblationConfig()),
    ("no-rag", improve_mod.AblationConfig(rag=False)),
    ("no-detector", improve_mod.AblationConfig(detector=False)),
    ("no-fewshot", improve_mod.AblationConfig(few_shot=False)),
)


def _require_artifact(path: Path, hint: str) -> Path:
    if not path.exists():
        raise UpstreamMissing(f"{path} not found; run `brqual {hint}` first")
    return path


def _load_corpus(path: Path) -> list[RawBugReport]:
    return [RawBugReport.from_dict(row) for row in read_jsonl(path)]


def _load_structured(path: Path) -> list[StructuredReport]:
    return [StructuredReport.from_dict(row) for row in read_jsonl(path)]


def _pool_size(cfg: PipelineConfig) -> int:
    return max(1, min(os.cpu_count() or 1, int(cfg.get("provider", "max_concurrency"))))


def _map_reports(cfg: PipelineConfig, items: Sequence[Any],
                 fn: Callable[[Any], Any]) -> list[Any]:
    """Bounded worker pool; result order follows the input order."""
    workers = _pool_size(cfg)
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _summary(command: str, counts: dict[str, Any], started: float) -> None:
    elapsed = time.perf_counter() - started
    parts = ", ".join(f"{v} {k}" for k, v in counts.items())
    print(f"{command}: {parts}, {elapsed:.2f}s")


# --- commands -----------------------------------------------------------------


def cmd_fetch(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    query = ingest.FetchQuery(
        project_key=cfg.get("tracker", "project"),
        created_after=cfg.get("tracker", "created_after"),
        max_results=args.max_results or int(cfg.get("tracker", "max_results")),
        page_size=int(cfg.get("tracker", "page_size")),
    )
    fixture_dir = cfg.get("tracker", "fixture_dir")
    if fixture_dir:
        source: Any = ingest.FixtureTracker(fixture_dir)
    else:
        base_url = cfg.get("tracker", "base_url")
        if not base_url:
            raise ConfigError("tracker.base_url or tracker.fixture_dir must be set")
        source = ingest.LiveTracker(base_url)
    if args.dry_run:
        print(f"fetch plan: project={query.project_key} max_results={query.max_results} "
              f"source={'fixture' if fixture_dir else 'live'}")
        return EXIT_OK
    reports = ingest.fetch_reports(query, source, corpus_path=cfg.corpus_path)
    # duplicate-link listing assists the manual ground-truth curation
    links = ingest.duplicate_links(reports)
    write_jsonl(cfg.artifact("duplicate_links.jsonl"), links)
    _summary("fetch", {"reports": len(reports), "duplicate-links": len(links)},
             started)
    return EXIT_OK


def cmd_sample(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    corpus = _load_corpus(_require_artifact(cfg.corpus_path, "fetch"))
    seed = int(cfg.get("sample", "seed"))
    total = min(int(cfg.get("sample", "total")), len(corpus))
    if args.dry_run:
        print(f"sample plan: {total} of {len(corpus)} reports, seed={seed}")
        return EXIT_OK
    sample, specs = ingest.stratified_sample(corpus, total, seed)
    write_jsonl(cfg.sample_path, (r.to_dict() for r in sample))
    ingest.write_sample_manifest(cfg.sample_manifest_path, seed, specs, sample)
    moe = ingest.margin_of_error(len(corpus), total, 0.5, 1.96)
    targeted = ingest.filter_target_resolutions(sample)
    print(f"margin of error: +/-{100 * moe:.2f}% at 95% confidence "
          f"(N={len(corpus)}, n={total})")
    _summary("sample", {"sampled": len(sample), "target-resolution": len(targeted)},
             started)
    return EXIT_OK


def cmd_preprocess(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    input_path = Path(args.input) if args.input else cfg.corpus_path
    corpus = _load_corpus(_require_artifact(input_path, "fetch"))
    if args.dry_run:
        print(f"preprocess plan: {len(corpus)} reports, <= {len(corpus)} provider calls")
        return EXIT_OK
    gateway = ProviderGateway(cfg.gateway_config())
    catalog = PromptCatalog(cfg.catalog_path)
    rules = ExtractionRules.load(cfg.rules_path)
    outcomes = _map_reports(cfg, corpus,
                            lambda raw: preprocess_report(raw, gateway, catalog, rules))
    outcomes.sort(key=lambda o: o.report.key)
    write_jsonl(cfg.preprocessed_path, (o.report.to_dict() for o in outcomes))
    warnings = [{"key": o.report.key, "warning": w}
                for o in outcomes for w in o.warnings]
    write_jsonl(cfg.preprocess_warnings_path, warnings)
    _summary("preprocess", {"reports": len(outcomes), "warnings": len(warnings)}, started)
    return EXIT_OK


def cmd_train_detector(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    labels_path = cfg.get("paths", "labels")
    if not labels_path:
        raise ConfigError("paths.labels must point to the labeled dataset")
    examples = [detect_mod.LabeledExample.from_dict(row)
                for row in read_jsonl(_require_artifact(Path(labels_path), "fetch"))]
    if args.dry_run:
        print(f"train plan: {len(examples)} labeled examples")
        return EXIT_OK
    model = detect_mod.train_classifier(examples, {"seed": args.seed or 0})
    model_path = cfg.get("detect", "model_path")
    if not model_path:
        raise ConfigError("detect.model_path must be set")
    model.save(model_path)
    acc = model.metadata.get("validation_accuracy")
    acc_text = f"{acc:.3f}" if acc is not None else "n/a"
    print(f"held-out accuracy: {acc_text} "
          f"({model.metadata.get('validation_count', 0)} examples)")
    _summary("train-detector", {"examples": len(examples),
                                "vocabulary": len(model.vocabulary)}, started)
    return EXIT_OK


def cmd_detect(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    input_path = Path(args.input) if args.input else cfg.preprocessed_path
    structured = _load_structured(_require_artifact(input_path, "preprocess"))
    raw_by_key = {r.key: r for r in _load_corpus(_require_artifact(cfg.corpus_path, "fetch"))}
    model_path = cfg.get("detect", "model_path")
    if not model_path or not Path(model_path).is_file():
        raise UpstreamMissing(f"detector model not found at {model_path}; "
                              f"run `brqual train-detector` first")
    model = detect_mod.ClassifierModel.load(model_path)
    if args.dry_run:
        print(f"detect plan: {len(structured)} reports, <= {len(structured)} provider calls")
        return EXIT_OK
    gateway = ProviderGateway(cfg.gateway_config())
    catalog = PromptCatalog(cfg.catalog_path)
    threshold = cfg.get("detect", "threshold")

    def run(report: StructuredReport) -> DetectionResult:
        raw = raw_by_key.get(report.key)
        summary = raw.summary if raw else ""
        description = raw.description if raw else ""
        return detect_mod.detect_report(report, summary, description, model,
                                        gateway, catalog, threshold=threshold)

    results = _map_reports(cfg, structured, run)
    results.sort(key=lambda r: r.key)
    write_jsonl(cfg.detections_path, (r.to_dict() for r in results))
    failed = sum(1 for r in results if r.verdict.value == "fail")
    invoked = sum(1 for r in results if r.llm_invoked)
    _summary("detect", {"reports": len(results), "fail": failed,
                        "llm-invoked": invoked}, started)
    return EXIT_OK


def _run_improve(cfg: PipelineConfig, ablation: improve_mod.AblationConfig,
                 output_path: Path) -> dict[str, Any]:
    structured = _load_structured(_require_artifact(cfg.preprocessed_path, "preprocess"))
    detections = {d.key: d for d in
                  (DetectionResult.from_dict(row)
                   for row in read_jsonl(_require_artifact(cfg.detections_path, "detect")))}
    raw_by_key = {r.key: r for r in _load_corpus(_require_artifact(cfg.corpus_path, "fetch"))}
    index = None
    if ablation.rag:
        index_dir = cfg.get("rag", "index_dir")
        if not index_dir or not (Path(index_dir) / "manifest.json").is_file():
            raise UpstreamMissing(f"knowledge index not found at {index_dir}; "
                                  f"run `brqual build-kb` first")
        index = rag.VectorIndex.load(index_dir)
    gateway = ProviderGateway(cfg.gateway_config())
    catalog = PromptCatalog(cfg.catalog_path)

    def run(report: StructuredReport) -> improve_mod.ImprovedReport:
        detection = detections.get(report.key)
        if detection is None:
            raise UpstreamMissing(f"no detection result for {report.key}")
        raw = raw_by_key.get(report.key)
        return improve_mod.improve_report(
            report, detection, gateway, index, catalog, ablation,
            summary=raw.summary if raw else "",
            description=raw.description if raw else "",
            pool_size=int(cfg.get("rag", "pool_size")),
            keep=int(cfg.get("rag", "keep")),
            token_budget=int(cfg.get("improve", "token_budget")))

    improved = _map_reports(cfg, structured, run)
    improved.sort(key=lambda r: r.base.key)
    write_jsonl(output_path, (r.to_dict() for r in improved))
    generated = sum(len([rec for rec in r.records if rec.error is None])
                    for r in improved)
    failures = sum(len([rec for rec in r.records if rec.error is not None])
                   for r in improved)
    return {"reports": len(improved), "sections-generated": generated,
            "section-failures": failures}


def cmd_improve(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    ablation = improve_mod.AblationConfig(rag=not args.no_rag,
                                          detector=not args.no_detector,
                                          few_shot=not args.no_fewshot)
    if args.dry_run:
        detections = list(read_jsonl(_require_artifact(cfg.detections_path, "detect")))
        flagged = sum(1 for d in detections if d["verdict"] == "fail")
        print(f"improve plan: {len(detections)} reports, {flagged} flagged, "
              f"ablation={ablation.to_dict()}")
        return EXIT_OK
    counts = _run_improve(cfg, ablation, cfg.improved_path)
    _summary("improve", counts, started)
    return EXIT_OK


def cmd_ablate(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    if args.dry_run:
        print(f"ablate plan: 4 improve runs over {cfg.detections_path}")
        return EXIT_OK
    rows = []
    for name, ablation in ABLATION_VARIANTS:
        out = cfg.ablation_dir / name / "improved.jsonl"
        counts = _run_improve(cfg, ablation, out)
        improved = [improve_mod.ImprovedReport.from_dict(row) for row in read_jsonl(out)]
        rates = eval_mod.completeness_rates(
            [eval_mod.check_completeness(r.base) for r in improved])
        rows.append({"variant": name, "ablation": ablation.to_dict(),
                     "reports": counts["reports"],
                     "sections_generated": counts["sections-generated"],
                     "complete_rate": rates["complete"],
                     "executable": "(manual label required)",
                     "reproducible": "(manual label required)"})
    cfg.ablation_dir.mkdir(parents=True, exist_ok=True)
    (cfg.ablation_dir / "comparison.json").write_text(
        dump_json({"variants": rows}) + "\n", encoding="utf-8")
    lines = [f"{'Configuration':<14}{'Generated':>10}{'Complete':>10}"
             f"  Executable / Reproducible"]
    lines.append("-" * 60)
    for row in rows:
        lines.append(f"{row['variant']:<14}{row['sections_generated']:>10}"
                     f"{100 * row['complete_rate']:>9.1f}%"
                     f"  {row['executable']}")
    (cfg.ablation_dir / "comparison.txt").write_text("\n".join(lines) + "\n",
                                                     encoding="utf-8")
    _summary("ablate", {"variants": len(rows)}, started)
    return EXIT_OK


def cmd_build_kb(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    knowledge_path = cfg.get("paths", "knowledge")
    if not knowledge_path:
        raise ConfigError("paths.knowledge must point to the document export")
    docs = list(read_jsonl(_require_artifact(Path(knowledge_path), "fetch")))
    index_dir = cfg.get("rag", "index_dir")
    if not index_dir:
        raise ConfigError("rag.index_dir must be set")
    if args.dry_run:
        print(f"build-kb plan: {len(docs)} documents")
        return EXIT_OK
    gateway = ProviderGateway(cfg.gateway_config())
    index = rag.ingest_knowledge(
        docs, gateway,
        chunk_size=int(cfg.get("rag", "chunk_size")),
        overlap=int(cfg.get("rag", "overlap")),
        index_dir=index_dir)
    _summary("build-kb", {"documents": len(docs), "chunks": len(index)}, started)
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    started = time.perf_counter()
    structured = _load_structured(_require_artifact(cfg.preprocessed_path, "preprocess"))
    improved = [improve_mod.ImprovedReport.from_dict(row)
                for row in read_jsonl(_require_artifact(cfg.improved_path, "improve"))]
    if args.dry_run:
        print(f"evaluate plan: {len(structured)} raw vs {len(improved)} improved")
        return EXIT_OK
    cfg.eval_dir.mkdir(parents=True, exist_ok=True)

    raw_rates = eval_mod.completeness_rates(
        [eval_mod.check_completeness(r) for r in structured])
    improved_rates = eval_mod.completeness_rates(
        [eval_mod.check_completeness(r.base) for r in improved])
    completeness = {"raw": raw_rates, "improved": improved_rates}
    (cfg.eval_dir / "completeness.json").write_text(dump_json(completeness) + "\n",
                                                    encoding="utf-8")
    table = eval_mod.render_completeness_table(raw_rates, improved_rates)
    (cfg.eval_dir / "completeness.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    counts: dict[str, Any] = {"reports": len(structured)}

    triples_path = cfg.get("eval", "triples_path")
    embeddings_path = cfg.get("eval", "embeddings_path")
    if triples_path and Path(triples_path).is_file():
        if not embeddings_path or not Path(embeddings_path).is_file():
            raise ConfigError("eval.embeddings_path required for the similarity study")
        table_wv = eval_mod.WordVectorTable.load(embeddings_path)
        triples = [eval_mod.StudyTriple.from_dict(row) for row in read_jsonl(triples_path)]
        study = eval_mod.run_similarity_study(triples, table_wv)
        (cfg.eval_dir / "similarity.json").write_text(dump_json(study.to_dict()) + "\n",
                                                      encoding="utf-8")
        sim_table = eval_mod.render_similarity_table(study)
        (cfg.eval_dir / "similarity.txt").write_text(sim_table + "\n", encoding="utf-8")
        counts["similarity-tests"] = len(study.tests)

    annotations_path = cfg.get("eval", "annotations_path")
    if annotations_path and Path(annotations_path).is_file():
        annotations = [eval_mod.ManualLabel.from_dict(row)
                       for row in read_jsonl(annotations_path)]
        kappa = eval_mod.kappa_study(annotations)
        (cfg.eval_dir / "kappa.json").write_text(
            dump_json({k: v.to_dict() for k, v in kappa.items()}) + "\n",
            encoding="utf-8")
        (cfg.eval_dir / "kappa.txt").write_text(
            eval_mod.render_kappa_table(kappa) + "\n", encoding="utf-8")
        counts["kappa-labels"] = len(annotations)

    _summary("evaluate", counts, started)
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

_COMMANDS = {
    "fetch": cmd_fetch,
    "sample": cmd_sample,
    "preprocess": cmd_preprocess,
    "detect": cmd_detect,
    "improve": cmd_improve,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "train-detector": cmd_train_detector,
    "build-kb": cmd_build_kb,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brqual",
                                     description="Bug report quality pipeline")
    parser.add_argument("--config", default=None, help="config file path "
                        "(default: $BRQUAL_CONFIG)")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable errors on stderr")
    parser.add_argument("--seed", type=int, default=None, help="override sample.seed")
    parser.add_argument("--dry-run", action="store_true",
                        help="print the execution plan without side effects")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fetch").add_argument("--max-results", type=int, default=None)
    sub.add_parser("sample")
    sub.add_parser("preprocess").add_argument("--input", default=None)
    sub.add_parser("detect").add_argument("--input", default=None)
    improve_p = sub.add_parser("improve")
    improve_p.add_argument("--no-rag", action="store_true")
    improve_p.add_argument("--no-detector", action="store_true")
    improve_p.add_argument("--no-fewshot", action="store_true")
    sub.add_parser("evaluate")
    sub.add_parser("ablate")
    sub.add_parser("train-detector")
    sub.add_parser("build-kb")
    return parser


def _emit_error(args: argparse.Namespace, code: int, exc: Exception) -> None:
    if getattr(args, "json", False):
        payload = {"error": {"code": code, "kind": type(exc).__name__,
                             "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"brqual: error: {exc}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config_path = args.config or os.environ.get("BRQUAL_CONFIG")
        flag_overrides: dict[str, dict[str, Any]] = {}
        if args.seed is not None:
            flag_overrides["sample"] = {"seed": args.seed}
        cfg = load_config(config_path, flag_overrides=flag_overrides)
        cfg.validate()
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _emit_error(args, EXIT_CONFIG, exc)
        return EXIT_CONFIG
    except UpstreamMissing as exc:
        _emit_error(args, EXIT_UPSTREAM, exc)
        return EXIT_UPSTREAM
    except ProviderError as exc:
        _emit_error(args, EXIT_PROVIDER, exc)
        return EXIT_PROVIDER
    except SchemaError as exc:
        _emit_error(args, EXIT_UPSTREAM, exc)
        return EXIT_UPSTREAM
    except BrqualError as exc:
        _emit_error(args, EXIT_CONFIG, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
