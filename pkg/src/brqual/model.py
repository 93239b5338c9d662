"""Shared domain types used by every pipeline stage.

All types here are immutable value objects after construction and can be
shared freely between worker threads. The canonical on-disk form for report
corpora is JSONL: one object per line, UTF-8, snake_case field names.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

_LIST_MARKER_RE = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s+")


class SectionKind(str, Enum):
    STEPS_TO_REPRODUCE = "steps_to_reproduce"
    ENVIRONMENT = "environment"
    OBSERVED_BEHAVIOR = "observed_behavior"
    EXPECTED_BEHAVIOR = "expected_behavior"

    @property
    def display(self) -> str:
        return "".join(part.capitalize() for part in self.value.split("_"))


SECTION_ORDER = (
    SectionKind.STEPS_TO_REPRODUCE,
    SectionKind.ENVIRONMENT,
    SectionKind.OBSERVED_BEHAVIOR,
    SectionKind.EXPECTED_BEHAVIOR,
)

REQUIRED_SECTIONS = (
    SectionKind.STEPS_TO_REPRODUCE,
    SectionKind.OBSERVED_BEHAVIOR,
    SectionKind.EXPECTED_BEHAVIOR,
)


class Provenance(str, Enum):
    LLM_EXTRACTED = "llm_extracted"
    HEADER_MATCHED = "header_matched"
    HEURISTIC_CLASSIFIED = "heuristic_classified"
    METADATA_ENRICHED = "metadata_enriched"
    GENERATED = "generated"
    ABSENT = "absent"


class IssueClass(str, Enum):
    MISSING = "missing"
    INCOMPLETE = "incomplete"
    AMBIGUOUS = "ambiguous"
    ENHANCE = "enhance"


class FlagSource(str, Enum):
    CLASSIFIER = "classifier"
    HEURISTIC = "heuristic"
    LLM_ANALYZER = "llm_analyzer"


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"


# --- timestamps -------------------------------------------------------------

_TS_FORMATS = (
    "%Y-%m-%dT%H:%M:%S.%f%z",
    "%Y-%m-%dT%H:%M:%S%z",
    "%Y-%m-%dT%H:%M:%S.%f",
    "%Y-%m-%dT%H:%M:%S",
)


def parse_timestamp(raw: str) -> datetime:
    """Parse a tracker timestamp into UTC, truncated to whole seconds.

    Accepts ISO-8601 with or without fractional seconds and with Z, +HHMM
    or +HH:MM offsets. Sub-second precision is dropped on purpose.
    """
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+0000"
    # normalize +HH:MM to +HHMM for strptime
    text = re.sub(r"([+-]\d{2}):(\d{2})$", r"\1\2", text)
    for fmt in _TS_FORMATS:
        try:
            dt = datetime.strptime(text, fmt)
        except ValueError:
            continue
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.astimezone(timezone.utc).replace(microsecond=0)
    raise ValueError(f"unrecognized timestamp: {raw!r}")


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --- raw report -------------------------------------------------------------

@dataclass(frozen=True)
class Comment:
    author: str
    body: str
    created: datetime

    def to_dict(self) -> dict[str, Any]:
        return {"author": self.author, "body": self.body,
                "created": format_timestamp(self.created)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Comment":
        return cls(author=d["author"], body=d["body"],
                   created=parse_timestamp(d["created"]))


@dataclass(frozen=True)
class IssueLink:
    link_type: str
    target_key: str

    def to_dict(self) -> dict[str, Any]:
        return {"link_type": self.link_type, "target_key": self.target_key}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "IssueLink":
        return cls(link_type=d["link_type"], target_key=d["target_key"])


@dataclass(frozen=True)
class RawBugReport:
    """A fetched tracker issue with its metadata."""

    key: str
    summary: str
    description: str
    created: datetime
    updated: datetime
    status: str
    resolution: str | None = None
    comments: tuple[Comment, ...] = ()
    affected_versions: tuple[str, ...] = ()
    priority: str | None = None
    issue_links: tuple[IssueLink, ...] = ()

    def __post_init__(self) -> None:
        if not self.key:
            raise ValueError("report key must be non-empty")
        if self.created > self.updated:
            raise ValueError(f"{self.key}: created is after updated")

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "summary": self.summary,
            "description": self.description,
            "created": format_timestamp(self.created),
            "updated": format_timestamp(self.updated),
            "status": self.status,
            "resolution": self.resolution,
            "comments": [c.to_dict() for c in self.comments],
            "affected_versions": list(self.affected_versions),
            "priority": self.priority,
            "issue_links": [l.to_dict() for l in self.issue_links],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RawBugReport":
        return cls(
            key=d["key"],
            summary=d["summary"],
            description=d.get("description") or "",
            created=parse_timestamp(d["created"]),
            updated=parse_timestamp(d["updated"]),
            status=d["status"],
            resolution=d.get("resolution"),
            comments=tuple(Comment.from_dict(c) for c in d.get("comments", [])),
            affected_versions=tuple(d.get("affected_versions", [])),
            priority=d.get("priority"),
            issue_links=tuple(IssueLink.from_dict(l) for l in d.get("issue_links", [])),
        )


# --- structured report ------------------------------------------------------

@dataclass(frozen=True)
class Section:
    content: str
    provenance: Provenance

    def to_dict(self) -> dict[str, Any]:
        return {"content": self.content, "provenance": self.provenance.value}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Section":
        return cls(content=d["content"], provenance=Provenance(d["provenance"]))


def parse_steps(content: str) -> tuple[str, ...]:
    """Split S2R section content into an ordered step list.

    Numbered or bulleted lines become individual steps with their markers
    stripped; otherwise each non-empty line is a step; a non-empty blob with
    no line structure becomes a single step.
    """
    if not content.strip():
        return ()
    steps: list[str] = []
    for line in content.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        steps.append(_LIST_MARKER_RE.sub("", stripped).strip() or stripped)
    return tuple(steps) if steps else (content.strip(),)


@dataclass(frozen=True)
class StructuredReport:
    """The four-section template with per-section extraction provenance."""

    key: str
    sections: dict[SectionKind, Section]
    s2r_steps: tuple[str, ...] = ()

    @classmethod
    def empty(cls, key: str) -> "StructuredReport":
        return cls(key=key,
                   sections={k: Section("", Provenance.ABSENT) for k in SECTION_ORDER})

    @classmethod
    def build(cls, key: str, sections: dict[SectionKind, Section]) -> "StructuredReport":
        """Construct with all four kinds present and s2r_steps derived."""
        full = {k: sections.get(k, Section("", Provenance.ABSENT)) for k in SECTION_ORDER}
        s2r = full[SectionKind.STEPS_TO_REPRODUCE].content
        return cls(key=key, sections=full, s2r_steps=parse_steps(s2r))

    def section_text(self, kind: SectionKind) -> str:
        sec = self.sections.get(kind)
        return sec.content if sec else ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "sections": {k.value: s.to_dict() for k, s in self.sections.items()},
            "s2r_steps": list(self.s2r_steps),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StructuredReport":
        loaded = {SectionKind(k): Section.from_dict(s)
                  for k, s in d.get("sections", {}).items()}
        # canonical section order regardless of JSON key order
        sections = {k: loaded[k] for k in SECTION_ORDER if k in loaded}
        sections.update((k, v) for k, v in loaded.items() if k not in sections)
        return cls(key=d["key"], sections=sections,
                   s2r_steps=tuple(d.get("s2r_steps", [])))


def validate_structured_report(report: StructuredReport) -> list[str]:
    """Return human-readable invariant violations; empty list means valid."""
    violations: list[str] = []
    if not report.key:
        violations.append("empty report key")
    for kind in SECTION_ORDER:
        if kind not in report.sections:
            violations.append(f"missing section key: {kind.display}")
    for kind, sec in report.sections.items():
        if not sec.content.strip() and sec.provenance is not Provenance.ABSENT:
            violations.append(f"empty content with non-absent provenance: {kind.display}")
        if sec.content.strip() and sec.provenance is Provenance.ABSENT:
            violations.append(f"non-empty content with absent provenance: {kind.display}")
    s2r = report.sections.get(SectionKind.STEPS_TO_REPRODUCE)
    if s2r is not None:
        has_content = bool(s2r.content.strip())
        has_steps = bool(report.s2r_steps)
        if has_content != has_steps:
            violations.append("s2r_steps inconsistent with S2R content")
    return violations


# --- detection --------------------------------------------------------------

@dataclass(frozen=True)
class IssueFlag:
    section: SectionKind
    issue_class: IssueClass
    detail: str
    source: FlagSource

    def to_dict(self) -> dict[str, Any]:
        return {"section": self.section.value, "issue_class": self.issue_class.value,
                "detail": self.detail, "source": self.source.value}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "IssueFlag":
        return cls(section=SectionKind(d["section"]),
                   issue_class=IssueClass(d["issue_class"]),
                   detail=d["detail"], source=FlagSource(d["source"]))


@dataclass(frozen=True)
class DetectionResult:
    key: str
    verdict: Verdict
    classifier_score: float
    flags: tuple[IssueFlag, ...]
    recommendations: tuple[str, ...]
    llm_invoked: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "verdict": self.verdict.value,
            "classifier_score": self.classifier_score,
            "flags": [f.to_dict() for f in self.flags],
            "recommendations": list(self.recommendations),
            "llm_invoked": self.llm_invoked,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DetectionResult":
        return cls(
            key=d["key"],
            verdict=Verdict(d["verdict"]),
            classifier_score=d["classifier_score"],
            flags=tuple(IssueFlag.from_dict(f) for f in d.get("flags", [])),
            recommendations=tuple(d.get("recommendations", [])),
            llm_invoked=d["llm_invoked"],
        )


# --- JSONL helpers ----------------------------------------------------------

def dump_json(obj: Any) -> str:
    """Canonical single-line JSON used for every artifact on disk."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> int:
    """Write rows as one JSON object per line; returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dump_json(row) + "\n")
            count += 1
    return count
