"""Fetch bug reports from a Jira-style tracker and draw the evaluation sample.

Live fetch speaks the Jira REST search endpoint; offline mode reads raw
issue payload JSON files from a directory and pushes them through the same
field-mapping path, so fixtures exercise the real code.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import AuthError, EmptyPopulation, SchemaError, TransportError
from .model import (RawBugReport, Comment, IssueLink, dump_json, format_timestamp,
                    parse_timestamp, write_jsonl)

logger = logging.getLogger(__name__)

NULL_RESOLUTION = "Null (Open)"

# the resolution types the study targets (case-insensitive match)
TARGET_RESOLUTIONS = ("Awaiting Response", "Cannot Reproduce", "Incomplete")


@dataclass(frozen=True)
class FetchQuery:
    project_key: str
    created_after: str | None = None
    max_results: int = 1000
    resolution_filter: tuple[str, ...] | None = None
    page_size: int = 100

    def __post_init__(self) -> None:
        if self.max_results <= 0 or self.page_size <= 0:
            raise ValueError("max_results and page_size must be positive")


@dataclass(frozen=True)
class StratumSpec:
    resolution_name: str
    population_count: int
    sample_count: int

    def __post_init__(self) -> None:
        if self.sample_count > self.population_count:
            raise ValueError("sample_count exceeds population_count")

    def to_dict(self) -> dict[str, Any]:
        return {"resolution_name": self.resolution_name,
                "population_count": self.population_count,
                "sample_count": self.sample_count}


# --- payload mapping ---------------------------------------------------------

def _require(payload: dict[str, Any], key: str, field: str) -> Any:
    value = payload.get(field)
    if value is None:
        raise SchemaError(f"{key or '<unknown>'}: missing field {field!r}")
    return value


def map_issue_payload(payload: dict[str, Any]) -> RawBugReport:
    """Map one raw Jira issue payload into a RawBugReport.

    Raises SchemaError naming the offending field when a required field is
    absent; description and the optional metadata default to empty.
    """
    key = payload.get("key")
    if not key:
        raise SchemaError("<unknown>: missing field 'key'")
    fields = _require(payload, key, "fields")

    def req(name: str) -> Any:
        value = fields.get(name)
        if value is None:
            raise SchemaError(f"{key}: missing field {name!r}")
        return value

    status = req("status")
    resolution = fields.get("resolution")
    comments_raw = (fields.get("comment") or {}).get("comments", [])
    comments = []
    for c in comments_raw:
        author = c.get("author") or {}
        comments.append(Comment(
            author=author.get("displayName") or author.get("name") or "",
            body=c.get("body") or "",
            created=parse_timestamp(c["created"]),
        ))
    links = []
    for l in fields.get("issuelinks", []):
        target = l.get("outwardIssue") or l.get("inwardIssue") or {}
        if target.get("key"):
            links.append(IssueLink(link_type=(l.get("type") or {}).get("name", ""),
                                   target_key=target["key"]))
    priority = fields.get("priority")
    try:
        return RawBugReport(
            key=key,
            summary=req("summary"),
            description=fields.get("description") or "",
            created=parse_timestamp(req("created")),
            updated=parse_timestamp(req("updated")),
            status=status.get("name") if isinstance(status, dict) else str(status),
            resolution=(resolution.get("name") if isinstance(resolution, dict)
                        else resolution),
            comments=tuple(comments),
            affected_versions=tuple(v.get("name", "") for v in fields.get("versions", [])),
            priority=(priority.get("name") if isinstance(priority, dict) else priority),
            issue_links=tuple(links),
        )
    except ValueError as exc:
        raise SchemaError(f"{key}: {exc}") from exc


class FixtureTracker:
    """Reads raw issue payloads from a directory, one JSON file per issue,
    in filename order (standing in for API order)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def search(self, query: FetchQuery) -> Iterator[dict[str, Any]]:
        if not self.directory.is_dir():
            raise TransportError(f"fixture directory not found: {self.directory}")
        for path in sorted(self.directory.glob("*.json")):
            with open(path, encoding="utf-8") as fh:
                yield json.load(fh)


class LiveTracker:
    """Jira REST search client with transparent pagination. Read-only."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _jql(self, query: FetchQuery) -> str:
        clauses = [f"project = {query.project_key}"]
        if query.created_after:
            clauses.append(f'created >= "{query.created_after}"')
        if query.resolution_filter:
            quoted = ", ".join(f'"{r}"' for r in query.resolution_filter)
            clauses.append(f"resolution in ({quoted})")
        return " AND ".join(clauses) + " ORDER BY created ASC"

    def search(self, query: FetchQuery) -> Iterator[dict[str, Any]]:
        import requests

        start = 0
        while start < query.max_results:
            page = min(query.page_size, query.max_results - start)
            params = {"jql": self._jql(query), "startAt": start, "maxResults": page}
            try:
                resp = requests.get(f"{self.base_url}/rest/api/2/search",
                                    params=params, timeout=self.timeout)
            except requests.RequestException as exc:
                raise TransportError(f"tracker search failed: {exc}") from exc
            if resp.status_code in (401, 403):
                raise AuthError(f"tracker returned HTTP {resp.status_code}")
            if resp.status_code >= 400:
                raise TransportError(f"tracker returned HTTP {resp.status_code}")
            data = resp.json()
            issues = data.get("issues", [])
            if not issues:
                return
            yield from issues
            start += len(issues)
            if start >= data.get("total", 0):
                return


def fetch_reports(query: FetchQuery, source: Any,
                  corpus_path: str | Path | None = None) -> list[RawBugReport]:
    """Fetch up to max_results reports via `source` and optionally persist them.

    Pagination is the source's concern; this dedupes by issue key, applies
    the created_after and resolution filters uniformly (so the fixture path
    behaves like the live one), truncates to max_results, and appends to
    the corpus JSONL when a path is given.
    """
    reports: list[RawBugReport] = []
    seen: set[str] = set()
    cutoff = parse_timestamp(query.created_after) if query.created_after else None
    wanted = None
    if query.resolution_filter:
        wanted = {r.lower() for r in query.resolution_filter}
    for payload in source.search(query):
        report = map_issue_payload(payload)
        if report.key in seen:
            continue
        if cutoff is not None and report.created < cutoff:
            continue
        if wanted is not None and (report.resolution or "").lower() not in wanted:
            continue
        seen.add(report.key)
        reports.append(report)
        if len(reports) >= query.max_results:
            break
    if corpus_path is not None:
        write_jsonl(corpus_path, (r.to_dict() for r in reports))
    return reports


# --- sampling ----------------------------------------------------------------

def resolution_stratum(report: RawBugReport) -> str:
    """Stratum name for a report; unresolved issues map to 'Null (Open)'."""
    return report.resolution if report.resolution else NULL_RESOLUTION


def apportion_counts(population_counts: dict[str, int], total_sample: int) -> dict[str, int]:
    """Proportional per-stratum sample counts that sum exactly to total_sample.

    Each stratum gets the floor of its exact quota; the leftover seats go to
    distinct strata ranked by the highest-averages criterion
    pop/(floor + 1) (exact rational comparison), ties broken by larger
    population then name. Every count stays within one of its quota.
    """
    pop_total = sum(population_counts.values())
    if pop_total == 0:
        raise EmptyPopulation("population has no reports")
    if total_sample > pop_total:
        raise ValueError("total_sample exceeds population size")
    quotas = {name: Fraction(count * total_sample, pop_total)
              for name, count in population_counts.items()}
    counts = {name: int(q) for name, q in quotas.items()}
    leftover = total_sample - sum(counts.values())
    eligible = [name for name, count in population_counts.items()
                if counts[name] < count]
    eligible.sort(key=lambda name: (-Fraction(population_counts[name], counts[name] + 1),
                                    -population_counts[name], name))
    for name in eligible[:leftover]:
        counts[name] += 1
    return counts


def stratified_sample(population: list[RawBugReport], total_sample: int,
                      seed: int) -> tuple[list[RawBugReport], list[StratumSpec]]:
    """Draw a proportional stratified sample, deterministic in the seed.

    Strata are resolution names ('Null (Open)' for unresolved). Selection
    within a stratum is uniform without replacement under a per-stratum RNG
    derived from (seed, stratum), so results do not depend on iteration
    order. The returned sample preserves population order.
    """
    if not population:
        raise EmptyPopulation("population is empty")
    if total_sample <= 0:
        raise ValueError("total_sample must be positive")
    if total_sample > len(population):
        raise ValueError("total_sample exceeds population size")

    strata: dict[str, list[int]] = {}
    for idx, report in enumerate(population):
        strata.setdefault(resolution_stratum(report), []).append(idx)
    counts = apportion_counts({n: len(v) for n, v in strata.items()}, total_sample)

    chosen: set[int] = set()
    specs: list[StratumSpec] = []
    for name in sorted(strata):
        members = strata[name]
        k = counts[name]
        digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        chosen.update(rng.sample(members, k))
        specs.append(StratumSpec(resolution_name=name,
                                 population_count=len(members), sample_count=k))
    sample = [population[i] for i in sorted(chosen)]
    return sample, specs


def margin_of_error(population_size: int, sample_size: int, proportion: float,
                    confidence_z: float) -> float:
    """Margin of error with the finite-population correction.

    z * sqrt(p(1-p)/n) * sqrt((N-n)/(N-1))
    """
    if sample_size <= 0 or population_size <= 0:
        raise ValueError("sizes must be positive")
    if sample_size > population_size:
        raise ValueError("sample_size exceeds population_size")
    if population_size == 1:
        return 0.0
    se = math.sqrt(proportion * (1.0 - proportion) / sample_size)
    fpc = math.sqrt((population_size - sample_size) / (population_size - 1))
    return confidence_z * se * fpc


def filter_target_resolutions(sample: list[RawBugReport],
                              targets: Iterable[str] = TARGET_RESOLUTIONS) -> list[RawBugReport]:
    """Keep only reports whose resolution matches a target name (case-insensitive)."""
    wanted = {t.lower() for t in targets}
    return [r for r in sample if (r.resolution or "").lower() in wanted]


def write_sample_manifest(path: str | Path, seed: int, specs: list[StratumSpec],
                          sample: list[RawBugReport]) -> None:
    """Manifest JSONL: a header with the seed and stratum table, then one
    {key, stratum} row per sampled report."""
    rows: list[dict[str, Any]] = [{"seed": seed, "strata": [s.to_dict() for s in specs]}]
    rows.extend({"key": r.key, "stratum": resolution_stratum(r)} for r in sample)
    write_jsonl(path, rows)


def duplicate_links(reports: list[RawBugReport]) -> list[dict[str, str]]:
    """List duplicate-type issue links to assist manual ground-truth curation."""
    rows = []
    for r in reports:
        for link in r.issue_links:
            if "duplicate" in link.link_type.lower():
                rows.append({"key": r.key, "link_type": link.link_type,
                             "target_key": link.target_key})
    return rows
