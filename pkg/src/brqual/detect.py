"""Hybrid low-quality detection: statistical classifier, structural
heuristics, and a gated LLM analyzer.

The reference classifier is logistic regression over L2-normalized TF-IDF
unigram features. It keeps the two-tier cost architecture (a cheap local
filter gates the expensive analyzer) while staying exactly testable; a
transformer can be plugged in behind the same model-file interface.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (DegenerateLabels, InsufficientData, MalformedCompletion,
                     ProviderError)
from .gateway import ChatRequest, ProviderGateway
from .model import (DetectionResult, FlagSource, IssueClass, IssueFlag,
                    REQUIRED_SECTIONS, SECTION_ORDER, SectionKind,
                    StructuredReport, Verdict, dump_json)
from .prompts import PromptCatalog
from .textutil import is_substantive, tokenize

logger = logging.getLogger(__name__)

ANALYZE_PROMPT_ID = "detect.analyze.v1"
LABEL_LOW = "low_quality"
LABEL_HIGH = "high_quality"
MIN_SUBSTANCE_TOKENS = 3

_ISSUE_LINE_RE = re.compile(r"^ISSUE:\s*([a-z_]+)\s*\|\s*([a-z]+)\s*\|\s*(.+)$")
_RECOMMEND_LINE_RE = re.compile(r"^RECOMMEND:\s*(.+)$")


@dataclass(frozen=True)
class LabeledExample:
    key: str
    text: str
    label: str

    def __post_init__(self) -> None:
        if self.label not in (LABEL_LOW, LABEL_HIGH):
            raise ValueError(f"unknown label: {self.label}")
        if not self.text:
            raise ValueError(f"{self.key}: empty text")

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "text": self.text, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LabeledExample":
        return cls(key=d["key"], text=d["text"], label=d["label"])


@dataclass
class ClassifierModel:
    """TF-IDF logistic regression; weights has one trailing bias term."""

    vocabulary: dict[str, int]
    idf: dict[str, float]
    weights: list[float]
    threshold: float = 0.5
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.vocabulary) + 1:
            raise ValueError("weights length must be vocabulary size + 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"version": 1, "vocabulary": self.vocabulary, "idf": self.idf,
               "weights": self.weights, "threshold": self.threshold,
               "metadata": self.metadata}
        path.write_text(dump_json(doc) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(vocabulary=doc["vocabulary"], idf=doc["idf"],
                   weights=doc["weights"], threshold=doc["threshold"],
                   metadata=doc.get("metadata", {}))


def _features(text: str, vocabulary: dict[str, int], idf: dict[str, float]) -> np.ndarray:
    """L2-normalized TF-IDF vector; raw term counts, OOV tokens ignored."""
    vec = np.zeros(len(vocabulary))
    for tok in tokenize(text):
        idx = vocabulary.get(tok)
        if idx is not None:
            vec[idx] += idf[tok]
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def train_classifier(examples: Sequence[LabeledExample],
                     config: dict[str, Any] | None = None) -> ClassifierModel:
    """Train the reference classifier; deterministic under config['seed'].

    A stratified 10% split is held out and its accuracy stored in the model
    metadata. Raises InsufficientData (< 2 examples) or DegenerateLabels
    (single class).
    """
    cfg = {"epochs": 300, "learning_rate": 1.0, "l2": 1e-4, "seed": 0}
    cfg.update(config or {})
    if len(examples) < 2:
        raise InsufficientData(f"need at least 2 examples, got {len(examples)}")
    labels = {e.label for e in examples}
    if len(labels) < 2:
        raise DegenerateLabels(f"all examples labeled {labels.pop()}")

    rng = np.random.RandomState(cfg["seed"])
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in (LABEL_LOW, LABEL_HIGH):
        members = [i for i, e in enumerate(examples) if e.label == label]
        members = list(rng.permutation(members))
        held = len(members) // 10
        val_idx.extend(members[:held])
        train_idx.extend(members[held:])
    train_idx.sort()
    val_idx.sort()

    # vocabulary and idf fitted on the training split only
    train_docs = [tokenize(examples[i].text) for i in train_idx]
    vocab_tokens = sorted({t for doc in train_docs for t in doc})
    vocabulary = {tok: i for i, tok in enumerate(vocab_tokens)}
    n_docs = len(train_docs)
    df = {tok: 0 for tok in vocab_tokens}
    for doc in train_docs:
        for tok in set(doc):
            df[tok] += 1
    idf = {tok: math.log((1 + n_docs) / (1 + df[tok])) + 1.0 for tok in vocab_tokens}

    X = np.stack([_features(examples[i].text, vocabulary, idf) for i in train_idx])
    X = np.hstack([X, np.ones((len(train_idx), 1))])
    y = np.array([1.0 if examples[i].label == LABEL_LOW else 0.0 for i in train_idx])

    w = np.zeros(X.shape[1])
    lr, l2 = float(cfg["learning_rate"]), float(cfg["l2"])
    for _ in range(int(cfg["epochs"])):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        grad = X.T @ (p - y) / len(y)
        grad[:-1] += l2 * w[:-1]  # bias unregularized
        w -= lr * grad

    model = ClassifierModel(vocabulary=vocabulary, idf=idf, weights=[float(v) for v in w],
                            metadata={
                                "labeled_count": len(examples),
                                "training_corpus_hash": _corpus_hash(examples),
                                "trained_at": str(cfg.get("trained_at", "")),
                            })
    if val_idx:
        correct = 0
        for i in val_idx:
            score = classify(model, examples[i].text)
            predicted = LABEL_LOW if score >= model.threshold else LABEL_HIGH
            correct += predicted == examples[i].label
        model.metadata["validation_accuracy"] = correct / len(val_idx)
        model.metadata["validation_count"] = len(val_idx)
    else:
        model.metadata["validation_accuracy"] = None
        model.metadata["validation_count"] = 0
    return model


def _corpus_hash(examples: Sequence[LabeledExample]) -> str:
    blob = "\n".join(dump_json(e.to_dict()) for e in examples)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def classify(model: ClassifierModel, text: str) -> float:
    """Probability the report is low quality: sigmoid of the linear score."""
    if not model.vocabulary:
        raise ValueError("model vocabulary is empty")
    vec = _features(text, model.vocabulary, model.idf)
    w = np.asarray(model.weights)
    return _sigmoid(float(vec @ w[:-1] + w[-1]))


def heuristic_check(report: StructuredReport) -> list[IssueFlag]:
    """One Missing flag per required section that is empty or too thin.

    Environment is informative but not required.
    """
    flags = []
    for kind in REQUIRED_SECTIONS:
        content = report.section_text(kind)
        if not is_substantive(content, MIN_SUBSTANCE_TOKENS):
            flags.append(IssueFlag(section=kind, issue_class=IssueClass.MISSING,
                                   detail=f"{kind.display} section is absent or below "
                                          f"the {MIN_SUBSTANCE_TOKENS}-token substance threshold",
                                   source=FlagSource.HEURISTIC))
    return flags


def parse_analysis_completion(completion: str) -> tuple[list[IssueFlag], list[str]]:
    """Parse ISSUE/RECOMMEND lines; lines naming unknown sections or issue
    classes are dropped, and a completion with no parseable line at all is
    malformed."""
    flags: list[IssueFlag] = []
    recommendations: list[str] = []
    parseable = 0
    known_sections = {k.value: k for k in SECTION_ORDER}
    for line in completion.splitlines():
        line = line.strip()
        issue = _ISSUE_LINE_RE.match(line)
        if issue:
            parseable += 1
            section = known_sections.get(issue.group(1))
            try:
                issue_class = IssueClass(issue.group(2))
            except ValueError:
                continue
            if section is None:
                continue
            flags.append(IssueFlag(section=section, issue_class=issue_class,
                                   detail=issue.group(3).strip(),
                                   source=FlagSource.LLM_ANALYZER))
            continue
        rec = _RECOMMEND_LINE_RE.match(line)
        if rec:
            parseable += 1
            recommendations.append(rec.group(1).strip())
    if parseable == 0:
        raise MalformedCompletion("analysis completion has no ISSUE/RECOMMEND lines")
    return flags, recommendations


def _render_sections(report: StructuredReport) -> str:
    parts = []
    for kind in SECTION_ORDER:
        content = report.section_text(kind) or "(empty)"
        parts.append(f"{kind.value}:\n{content}")
    return "\n\n".join(parts)


def llm_analyze(report: StructuredReport, prior: dict[str, Any],
                gateway: ProviderGateway, catalog: PromptCatalog) -> tuple[list[IssueFlag], list[str]]:
    """Detailed per-section analysis, invoked only when the gate fires.

    `prior` carries classifier_score and heuristic_flags so the analyzer
    sees the earlier assessments.
    """
    prompt = catalog.utility(ANALYZE_PROMPT_ID)
    flag_lines = "\n".join(f"- {f.section.value} {f.issue_class.value}: {f.detail}"
                           for f in prior.get("heuristic_flags", [])) or "(none)"
    request = ChatRequest(
        prompt_id=ANALYZE_PROMPT_ID,
        system_text=prompt.system_text,
        user_text=prompt.render(key=report.key,
                                sections=_render_sections(report),
                                classifier_score=f"{prior.get('classifier_score', 0.0):.3f}",
                                heuristic_flags=flag_lines),
        max_output_tokens=gateway.config.max_output_tokens,
    )
    completion = gateway.chat(request)
    return parse_analysis_completion(completion)


def detect_report(report: StructuredReport, raw_summary: str, raw_description: str,
                  model: ClassifierModel, gateway: ProviderGateway,
                  catalog: PromptCatalog, threshold: float | None = None) -> DetectionResult:
    """Run the full detection stack with the gating rule.

    The analyzer runs iff classifier_score >= threshold or a heuristic flag
    exists; a firing classifier contributes Enhance flags for the three
    improvable sections so the verdict reflects it. Provider failures leave
    a degraded result (llm_invoked recorded truthfully) rather than failing
    the report.
    """
    cut = threshold if threshold is not None else model.threshold
    score = classify(model, f"{raw_summary}\n{raw_description}")
    heuristic_flags = heuristic_check(report)
    flags: list[IssueFlag] = list(heuristic_flags)
    if score >= cut:
        for kind in REQUIRED_SECTIONS:
            flags.append(IssueFlag(section=kind, issue_class=IssueClass.ENHANCE,
                                   detail=f"classifier score {score:.3f} >= threshold {cut}",
                                   source=FlagSource.CLASSIFIER))

    recommendations: list[str] = []
    llm_invoked = False
    if score >= cut or heuristic_flags:
        llm_invoked = True
        try:
            analyzer_flags, recommendations = llm_analyze(
                report,
                {"classifier_score": score, "heuristic_flags": heuristic_flags},
                gateway, catalog)
            flags.extend(analyzer_flags)
        except MalformedCompletion as exc:
            logger.warning("%s: analyzer output unusable: %s", report.key, exc)
        except ProviderError as exc:
            logger.warning("%s: degraded analysis, provider failed: %s", report.key, exc)

    deduped: list[IssueFlag] = []
    seen: set[tuple[SectionKind, IssueClass, FlagSource]] = set()
    for flag in flags:
        key = (flag.section, flag.issue_class, flag.source)
        if key not in seen:
            seen.add(key)
            deduped.append(flag)

    return DetectionResult(
        key=report.key,
        verdict=Verdict.FAIL if deduped else Verdict.PASS,
        classifier_score=score,
        flags=tuple(deduped),
        recommendations=tuple(recommendations),
        llm_invoked=llm_invoked,
    )
