"""Evaluation methodology: structural completeness, lexical and embedding
similarity against ground truth, paired significance testing with multiple-
comparison correction and effect sizes, and inter-rater agreement with
empty-value semantics.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import EmptyTable, LengthMismatch, UnpairedAnnotation
from .model import REQUIRED_SECTIONS, SectionKind, StructuredReport
from .stats import (KappaResult, bonferroni, cliffs_delta, cohens_kappa,
                    wilcoxon_signed_rank)
from .textutil import is_substantive, tokenize

logger = logging.getLogger(__name__)

METRIC_TFIDF = "tfidf"
METRIC_EMBEDDING = "embedding"
COMPONENT_AVERAGE = "average"

VERSION_RAW = "raw"
VERSION_IMPROVED = "improved"

S2R_LEAVES = (
    "executable.reproducible.valid",
    "executable.reproducible.invalid",
    "executable.irreproducible",
    "non_executable.ambiguous_info",
    "non_executable.missing_info",
    "non_executable.wrong_info",
)
OB_LEAVES = ("not_present", "present.sufficient", "present.insufficient")
EB_LEAVES = ("not_present", "present.accurate", "present.inaccurate")

LABEL_LEAVES = {"s2r": S2R_LEAVES, "ob": OB_LEAVES, "eb": EB_LEAVES}


# --- completeness -------------------------------------------------------------

@dataclass(frozen=True)
class CompletenessResult:
    key: str
    has_s2r: bool
    has_ob: bool
    has_eb: bool

    @property
    def complete(self) -> bool:
        return self.has_s2r and self.has_ob and self.has_eb

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "has_s2r": self.has_s2r, "has_ob": self.has_ob,
                "has_eb": self.has_eb, "complete": self.complete}


def check_completeness(report: StructuredReport) -> CompletenessResult:
    """Per-section presence under the detector's substance threshold."""
    return CompletenessResult(
        key=report.key,
        has_s2r=is_substantive(report.section_text(SectionKind.STEPS_TO_REPRODUCE)),
        has_ob=is_substantive(report.section_text(SectionKind.OBSERVED_BEHAVIOR)),
        has_eb=is_substantive(report.section_text(SectionKind.EXPECTED_BEHAVIOR)),
    )


def completeness_rates(results: Sequence[CompletenessResult]) -> dict[str, float]:
    n = len(results)
    if n == 0:
        return {"s2r": 0.0, "ob": 0.0, "eb": 0.0, "complete": 0.0, "count": 0}
    return {
        "s2r": sum(r.has_s2r for r in results) / n,
        "ob": sum(r.has_ob for r in results) / n,
        "eb": sum(r.has_eb for r in results) / n,
        "complete": sum(r.complete for r in results) / n,
        "count": n,
    }


# --- similarity ----------------------------------------------------------------

def tfidf_cosine(doc_a: str, doc_b: str, corpus: Sequence[str]) -> float:
    """Cosine of L2-normalized TF-IDF vectors.

    Raw term counts, idf = ln((1+N)/(1+df)) + 1 fitted on `corpus` (which
    should include both documents), lowercased alphanumeric tokens. Zero
    vectors (e.g. both documents empty) yield 0.0.
    """
    n_docs = len(corpus)
    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(tokenize(doc)))

    def vec(doc: str) -> dict[str, float]:
        tf = Counter(tokenize(doc))
        return {t: count * (math.log((1 + n_docs) / (1 + df[t])) + 1.0)
                for t, count in tf.items()}

    va, vb = vec(doc_a), vec(doc_b)
    na = math.sqrt(sum(v * v for v in va.values()))
    nb = math.sqrt(sum(v * v for v in vb.values()))
    if na == 0 or nb == 0:
        logger.debug("tfidf_cosine: zero vector, returning 0.0")
        return 0.0
    dot = sum(v * vb[t] for t, v in va.items() if t in vb)
    return dot / (na * nb)


class WordVectorTable:
    """Word vectors in the standard text format: 'count dim' header, then
    one 'token v1 .. vd' line per word."""

    def __init__(self, vectors: dict[str, np.ndarray], dimension: int):
        if not vectors:
            raise EmptyTable("word-vector table is empty")
        self.vectors = vectors
        self.dimension = dimension

    @classmethod
    def load(cls, path: str | Path) -> "WordVectorTable":
        path = Path(path)
        vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise EmptyTable(f"{path}: malformed header line")
            count, dim = int(header[0]), int(header[1])
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    continue
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
        if not vectors:
            raise EmptyTable(f"{path}: no vectors loaded")
        return cls(vectors=vectors, dimension=dim)

    def mean_vector(self, text: str) -> np.ndarray | None:
        """Arithmetic mean of in-vocabulary token vectors; None if all OOV."""
        rows = [self.vectors[t] for t in tokenize(text) if t in self.vectors]
        if not rows:
            return None
        return np.mean(rows, axis=0)


def embedding_cosine(doc_a: str, doc_b: str, table: WordVectorTable) -> float:
    """Cosine of mean word vectors; 0.0 with a warning when a document has
    no in-vocabulary token."""
    va = table.mean_vector(doc_a)
    vb = table.mean_vector(doc_b)
    if va is None or vb is None:
        logger.warning("embedding_cosine: document entirely out of vocabulary")
        return 0.0
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(va @ vb / (na * nb))


# --- study -----------------------------------------------------------------------

@dataclass(frozen=True)
class StatTestResult:
    component: str          # section value or "average"
    metric: str             # tfidf | embedding
    w_statistic: float
    p_value: float
    corrected_alpha: float
    significant: bool
    cliffs_delta: float
    magnitude: str

    def to_dict(self) -> dict[str, Any]:
        return {"component": self.component, "metric": self.metric,
                "w_statistic": self.w_statistic, "p_value": self.p_value,
                "corrected_alpha": self.corrected_alpha,
                "significant": self.significant,
                "cliffs_delta": self.cliffs_delta, "magnitude": self.magnitude}


@dataclass(frozen=True)
class SimilarityScores:
    """Per-section similarity of one report version against ground truth."""

    key: str
    version: str                      # raw | improved_a | improved_b
    tfidf: dict[str, float]           # section value -> cosine in [0, 1]
    embedding: dict[str, float]       # section value -> cosine in [-1, 1]

    @property
    def tfidf_average(self) -> float:
        return sum(self.tfidf.values()) / len(self.tfidf)

    @property
    def embedding_average(self) -> float:
        return sum(self.embedding.values()) / len(self.embedding)

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "version": self.version,
                "tfidf": dict(self.tfidf), "embedding": dict(self.embedding),
                "tfidf_average": self.tfidf_average,
                "embedding_average": self.embedding_average}


@dataclass(frozen=True)
class StudyTriple:
    """One comparison unit: section texts for the raw report, two improved
    variants, and the ground truth."""

    key: str
    raw: dict[SectionKind, str]
    improved_a: dict[SectionKind, str]
    improved_b: dict[SectionKind, str]
    ground_truth: dict[SectionKind, str]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StudyTriple":
        def sec(m: dict[str, str]) -> dict[SectionKind, str]:
            return {SectionKind(k): v for k, v in m.items()}
        return cls(key=d["key"], raw=sec(d["raw"]), improved_a=sec(d["improved_a"]),
                   improved_b=sec(d["improved_b"]), ground_truth=sec(d["ground_truth"]))


@dataclass
class StudyReport:
    means: dict[str, dict[str, dict[str, float]]]  # metric -> component -> version -> mean
    tests: list[StatTestResult]
    corrected_alpha: float
    triple_count: int
    scores: list[SimilarityScores] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"means": self.means, "tests": [t.to_dict() for t in self.tests],
                "corrected_alpha": self.corrected_alpha,
                "triple_count": self.triple_count,
                "scores": [s.to_dict() for s in self.scores]}


def run_similarity_study(triples: Sequence[StudyTriple], table: WordVectorTable,
                         corpus: Sequence[str] | None = None,
                         alpha: float = 0.05) -> StudyReport:
    """Score raw and both improved variants against ground truth, then run
    the 6 paired variant-vs-variant tests (3 components x 2 metrics) with
    Bonferroni-corrected alpha and Cliff's delta. The extra Average rows
    use the per-report mean of the three component scores.
    """
    if len(triples) < 5:
        raise ValueError(f"need at least 5 triples, got {len(triples)}")
    if corpus is None:
        corpus = [text for t in triples
                  for version in (t.raw, t.improved_a, t.improved_b, t.ground_truth)
                  for text in version.values()]

    versions = ("raw", "improved_a", "improved_b")
    components = list(REQUIRED_SECTIONS)

    def score(metric: str, left: str, right: str) -> float:
        if metric == METRIC_TFIDF:
            return tfidf_cosine(left, right, corpus)
        return embedding_cosine(left, right, table)

    # scores[metric][component][version] = per-triple list
    scores: dict[str, dict[str, dict[str, list[float]]]] = {
        m: {c.value: {v: [] for v in versions} for c in components}
        for m in (METRIC_TFIDF, METRIC_EMBEDDING)}
    for t in triples:
        for metric in (METRIC_TFIDF, METRIC_EMBEDDING):
            for comp in components:
                truth = t.ground_truth.get(comp, "")
                for version, sections in (("raw", t.raw), ("improved_a", t.improved_a),
                                          ("improved_b", t.improved_b)):
                    scores[metric][comp.value][version].append(
                        score(metric, sections.get(comp, ""), truth))

    # average component: per-report mean of the three component scores
    for metric in (METRIC_TFIDF, METRIC_EMBEDDING):
        avg: dict[str, list[float]] = {v: [] for v in versions}
        for i in range(len(triples)):
            for version in versions:
                avg[version].append(
                    sum(scores[metric][c.value][version][i] for c in components) / len(components))
        scores[metric][COMPONENT_AVERAGE] = avg

    corrected = bonferroni(alpha, 2 * len(components))
    tests: list[StatTestResult] = []
    for metric in (METRIC_TFIDF, METRIC_EMBEDDING):
        for comp in [c.value for c in components] + [COMPONENT_AVERAGE]:
            a = scores[metric][comp]["improved_b"]
            b = scores[metric][comp]["improved_a"]
            wres = wilcoxon_signed_rank(a, b)
            delta = cliffs_delta(a, b)
            tests.append(StatTestResult(
                component=comp, metric=metric,
                w_statistic=wres["w_statistic"], p_value=wres["p_value"],
                corrected_alpha=corrected,
                significant=wres["p_value"] <= corrected,
                cliffs_delta=delta["delta"], magnitude=delta["magnitude"]))

    means = {metric: {comp: {version: float(np.mean(vals))
                             for version, vals in by_version.items()}
                      for comp, by_version in by_comp.items()}
             for metric, by_comp in scores.items()}
    rows = [SimilarityScores(
                key=t.key, version=version,
                tfidf={c.value: scores[METRIC_TFIDF][c.value][version][i]
                       for c in components},
                embedding={c.value: scores[METRIC_EMBEDDING][c.value][version][i]
                           for c in components})
            for i, t in enumerate(triples) for version in versions]
    return StudyReport(means=means, tests=tests, corrected_alpha=corrected,
                       triple_count=len(triples), scores=rows)


# --- manual labels and agreement ----------------------------------------------------

@dataclass(frozen=True)
class ManualLabel:
    key: str
    version: str                    # raw | improved
    annotator: str
    s2r_label: str | None = None    # hierarchy path, e.g. executable.reproducible.valid
    ob_label: str | None = None
    eb_label: str | None = None

    def __post_init__(self) -> None:
        if self.version not in (VERSION_RAW, VERSION_IMPROVED):
            raise ValueError(f"unknown version: {self.version}")
        for value, leaves, name in ((self.s2r_label, S2R_LEAVES, "s2r_label"),
                                    (self.ob_label, OB_LEAVES, "ob_label"),
                                    (self.eb_label, EB_LEAVES, "eb_label")):
            if value is not None and value not in leaves:
                raise ValueError(f"{self.key}: {name} {value!r} not in the label hierarchy")

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "version": self.version, "annotator": self.annotator,
                "s2r_label": self.s2r_label, "ob_label": self.ob_label,
                "eb_label": self.eb_label}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ManualLabel":
        return cls(key=d["key"], version=d["version"], annotator=d["annotator"],
                   s2r_label=d.get("s2r_label"), ob_label=d.get("ob_label"),
                   eb_label=d.get("eb_label"))


def kappa_study(annotations: Sequence[ManualLabel]) -> dict[str, KappaResult]:
    """Cohen's kappa per label type (S2R, OB, EB) across all annotations.

    Every (key, version) pair must be annotated by exactly two annotators;
    empty labels form their own category. Subset the annotations before
    calling to get per-version or per-variant agreement.
    """
    groups: dict[tuple[str, str], list[ManualLabel]] = {}
    for ann in annotations:
        groups.setdefault((ann.key, ann.version), []).append(ann)
    pairs_a: dict[str, list[str | None]] = {"s2r": [], "ob": [], "eb": []}
    pairs_b: dict[str, list[str | None]] = {"s2r": [], "ob": [], "eb": []}
    for (key, version), members in sorted(groups.items()):
        if len(members) != 2:
            raise UnpairedAnnotation(
                f"{key}/{version}: expected 2 annotators, got {len(members)}")
        first, second = sorted(members, key=lambda m: m.annotator)
        pairs_a["s2r"].append(first.s2r_label)
        pairs_b["s2r"].append(second.s2r_label)
        pairs_a["ob"].append(first.ob_label)
        pairs_b["ob"].append(second.ob_label)
        pairs_a["eb"].append(first.eb_label)
        pairs_b["eb"].append(second.eb_label)
    results = {}
    for label_type, leaves in LABEL_LEAVES.items():
        categories = list(leaves) + ["(empty)"]
        results[label_type] = cohens_kappa(pairs_a[label_type], pairs_b[label_type],
                                           categories=categories,
                                           label_type=label_type.upper())
    return results


# --- text tables -----------------------------------------------------------------

def _pct(x: float) -> str:
    return f"{100.0 * x:5.1f}%"


def render_completeness_table(raw: dict[str, float], improved: dict[str, float]) -> str:
    rows = [("Observed Behavior (OB)", "ob"), ("Expected Behavior (EB)", "eb"),
            ("Steps to Reproduce (S2R)", "s2r"), ("Complete Reports", "complete")]
    lines = [f"{'Element':<28}{'Raw':>8}{'Improved':>10}{'Change':>9}"]
    lines.append("-" * 55)
    for label, field_name in rows:
        delta = improved[field_name] - raw[field_name]
        lines.append(f"{label:<28}{_pct(raw[field_name]):>8}"
                     f"{_pct(improved[field_name]):>10}{100 * delta:>+8.1f}%")
    return "\n".join(lines)


def render_similarity_table(report: StudyReport,
                            labels: tuple[str, str, str] = ("Raw", "VariantA", "VariantB")) -> str:
    metric_names = {METRIC_TFIDF: "TF-IDF", METRIC_EMBEDDING: "Embedding"}
    comp_names = {SectionKind.OBSERVED_BEHAVIOR.value: "OB",
                  SectionKind.EXPECTED_BEHAVIOR.value: "EB",
                  SectionKind.STEPS_TO_REPRODUCE.value: "S2R",
                  COMPONENT_AVERAGE: "Avg."}
    order = [SectionKind.OBSERVED_BEHAVIOR.value, SectionKind.EXPECTED_BEHAVIOR.value,
             SectionKind.STEPS_TO_REPRODUCE.value, COMPONENT_AVERAGE]
    lines = [f"{'Type':<10}{'Comp.':<7}{labels[0]:>8}{labels[1]:>10}{labels[2]:>10}"
             f"{'Diff.':>9}{'p':>10}{'delta':>8}  magnitude"]
    lines.append("-" * 80)
    tests = {(t.metric, t.component): t for t in report.tests}
    for metric in (METRIC_TFIDF, METRIC_EMBEDDING):
        for comp in order:
            m = report.means[metric][comp]
            t = tests[(metric, comp)]
            diff = m["improved_b"] - m["improved_a"]
            star = "*" if t.significant else " "
            lines.append(
                f"{metric_names[metric]:<10}{comp_names[comp]:<7}"
                f"{_pct(m['raw']):>8}{_pct(m['improved_a']):>10}{_pct(m['improved_b']):>10}"
                f"{100 * diff:>+8.1f}%{t.p_value:>10.4f}{t.cliffs_delta:>8.2f}"
                f"  {t.magnitude}{star}")
    lines.append(f"(* significant at Bonferroni-corrected alpha = "
                 f"{report.corrected_alpha:.4f}, {report.triple_count} pairs)")
    return "\n".join(lines)


def render_kappa_table(results: dict[str, KappaResult]) -> str:
    lines = [f"{'Label':<8}{'kappa':>8}{'agreement':>12}"]
    lines.append("-" * 28)
    for label_type in ("s2r", "ob", "eb"):
        r = results[label_type]
        lines.append(f"{label_type.upper():<8}{r.kappa:>8.3f}"
                     f"{_pct(r.observed_agreement):>12}")
    return "\n".join(lines)
