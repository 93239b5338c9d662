"""Clean raw report text and extract the four-section structured template.

Extraction is two-level: a conservative LLM pass fills sections only where
the completion shows explicit evidence (and its output must fuzzy-match the
source or it is rejected outright), then a heuristic pass recovers explicit
headers and classifies leftover sentences by cue voting. Metadata enrichment
runs last. Original sentence text is preserved verbatim in whichever section
it lands in.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, MalformedCompletion, ProviderError
from .gateway import ChatRequest, ProviderGateway
from .model import (Provenance, RawBugReport, Section, SectionKind, SECTION_ORDER,
                    StructuredReport)
from .prompts import PromptCatalog
from .textutil import token_overlap_ratio

logger = logging.getLogger(__name__)

EXTRACT_PROMPT_ID = "preprocess.extract.v1"
CONTENT_OVERLAP_MIN = 0.9

# cleaning patterns (normative): URLs, Jira wiki markup, HTML tags
_URL_RE = re.compile(r"(?:https?://\S+|www\.\S+)")
_CODE_PAIR_RE = re.compile(r"\{code(?::[^}]*)?\}(.*?)\{code\}", re.DOTALL)
_COLOR_PAIR_RE = re.compile(r"\{color:[^}]*\}(.*?)\{color\}", re.DOTALL)
_QUOTE_PAIR_RE = re.compile(r"\{quote\}(.*?)\{quote\}", re.DOTALL)
_LONE_MARKER_RE = re.compile(r"\{(?:code(?::[^}]*)?|color(?::[^}]*)?|quote)\}")
_HTML_PAIR_RE = re.compile(r"<(\w+)(?:\s[^>]*)?>(.*?)</\1\s*>", re.DOTALL)
_HTML_TAG_RE = re.compile(r"<[^>\s][^>]*>")
_BOLD_RE = re.compile(r"(?<![\w*])\*([^*\n]+?)\*(?![\w*])")
_ITALIC_RE = re.compile(r"(?<![\w_])_([^_\n]+?)_(?![\w_])")

_LIST_ITEM_RE = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s+")
_VERSION_RE = re.compile(r"\b\d+(?:\.\d+)+\b")
_PROTECTED_ABBREVIATIONS = ("e.g.", "i.e.", "etc.", "vs.")

REMOVED_URL = "url"
REMOVED_MARKDOWN = "markdown"
REMOVED_HTML = "html_tag"


@dataclass(frozen=True)
class RemovedSpan:
    kind: str
    original: str


@dataclass(frozen=True)
class CleanedText:
    text: str
    removed_spans: tuple[RemovedSpan, ...] = ()


@dataclass(frozen=True)
class SentenceSpan:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class HeuristicSignal:
    sentence: SentenceSpan
    section_votes: dict[SectionKind, float]
    matched_cues: tuple[str, ...]


@dataclass
class ExtractionRules:
    """Header grammar and cue lexicons, loaded from the rules file."""

    headers: dict[SectionKind, list[str]]
    s2r_action_verbs: set[str]
    ob_failure_verbs: set[str]
    ob_negations: set[str]
    eb_modal_words: set[str]
    eb_modal_phrases: list[str]
    env_os_names: list[str]
    env_editions: list[str]
    domain_terms: set[str]
    vote_threshold: float = 1.0

    @classmethod
    def load(cls, path: str | Path) -> "ExtractionRules":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"rules file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        try:
            headers = {SectionKind(k): list(v) for k, v in raw["headers"].items()}
            cues = raw["cues"]
            modal_words = {w for w in cues["eb_modals"] if " " not in w}
            modal_phrases = [w for w in cues["eb_modals"] if " " in w]
            terms_file = path.parent / raw.get("domain_terms_file", "domain_terms.txt")
            terms: set[str] = set()
            if terms_file.is_file():
                terms = {line.strip().lower() for line in terms_file.read_text().splitlines()
                         if line.strip() and not line.startswith("#")}
            return cls(
                headers=headers,
                s2r_action_verbs={w.lower() for w in cues["s2r_action_verbs"]},
                ob_failure_verbs={w.lower() for w in cues["ob_failure_verbs"]},
                ob_negations={w.lower() for w in cues["ob_negations"]},
                eb_modal_words={w.lower() for w in modal_words},
                eb_modal_phrases=[w.lower() for w in modal_phrases],
                env_os_names=[w.lower() for w in cues["env_os_names"]],
                env_editions=[w.lower() for w in cues["env_editions"]],
                domain_terms=terms,
                vote_threshold=float(raw.get("vote_threshold", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"rules file {path} malformed: {exc}") from exc

    def header_patterns(self) -> dict[SectionKind, re.Pattern]:
        compiled = {}
        for kind, words in self.headers.items():
            alts = "|".join(re.escape(w) for w in sorted(words, key=len, reverse=True))
            # bare header line, or header words followed by a separator and
            # optional inline content
            compiled[kind] = re.compile(
                rf"^\s*(?:h\d\.\s*)?(?:{alts})\s*(?:(?:[:\-–—])\s*(?P<rest>.*))?$",
                re.IGNORECASE)
        return compiled


def default_rules_path() -> Path:
    return Path(__file__).parent / "data" / "rules.yaml"


# --- cleaning -----------------------------------------------------------------

def clean_text(raw: str) -> CleanedText:
    """Strip URLs, Jira wiki markup, and HTML tags, keeping inner text.

    Paired markup ({color}..{color}, <b>..</b>, *bold*) is recorded as one
    removed span per pair; whitespace runs left behind are collapsed per
    line so the invariant "no markup substrings remain" holds.
    """
    removed: list[RemovedSpan] = []
    text = raw or ""

    def keep_inner(kind: str):
        def sub(match: re.Match) -> str:
            removed.append(RemovedSpan(kind=kind, original=match.group(0)))
            return match.group(match.lastindex or 0)
        return sub

    def drop(kind: str):
        def sub(match: re.Match) -> str:
            removed.append(RemovedSpan(kind=kind, original=match.group(0)))
            return ""
        return sub

    text = _CODE_PAIR_RE.sub(keep_inner(REMOVED_MARKDOWN), text)
    text = _COLOR_PAIR_RE.sub(keep_inner(REMOVED_MARKDOWN), text)
    text = _QUOTE_PAIR_RE.sub(keep_inner(REMOVED_MARKDOWN), text)
    text = _LONE_MARKER_RE.sub(drop(REMOVED_MARKDOWN), text)
    text = _HTML_PAIR_RE.sub(keep_inner(REMOVED_HTML), text)
    text = _HTML_TAG_RE.sub(drop(REMOVED_HTML), text)
    text = _URL_RE.sub(drop(REMOVED_URL), text)
    text = _BOLD_RE.sub(keep_inner(REMOVED_MARKDOWN), text)
    text = _ITALIC_RE.sub(keep_inner(REMOVED_MARKDOWN), text)

    lines = [re.sub(r"[ \t]+", " ", line).strip() for line in text.splitlines()]
    cleaned = "\n".join(lines).strip()
    return CleanedText(text=cleaned, removed_spans=tuple(removed))


# --- segmentation ---------------------------------------------------------------

def _is_protected_terminal(line: str, pos: int) -> bool:
    """True if the terminal char at `pos` belongs to a protected token."""
    prefix = line[: pos + 1]
    for abbr in _PROTECTED_ABBREVIATIONS:
        if prefix.lower().endswith(abbr):
            return True
    return False


def segment_sentences(cleaned: CleanedText) -> list[SentenceSpan]:
    """Deterministic rule-based segmentation of the cleaned text.

    List-item lines are kept whole; other lines split after [.!?] runs that
    are followed by whitespace and an uppercase letter or digit. Version
    strings survive because their internal dots are never followed by
    whitespace, and listed abbreviations are explicitly protected.
    """
    spans: list[SentenceSpan] = []
    offset = 0
    for line in cleaned.text.split("\n"):
        stripped = line.strip()
        if stripped:
            lead = len(line) - len(line.lstrip())
            trail = len(line) - len(line.rstrip())
            ls = offset + lead
            le = offset + len(line) - trail
            if _LIST_ITEM_RE.match(line):
                spans.append(SentenceSpan(text=line[lead:len(line) - trail], start=ls, end=le))
            else:
                spans.extend(_split_line(line, lead, len(line) - trail, offset))
        offset += len(line) + 1
    return spans


def _split_line(line: str, lo: int, hi: int, offset: int) -> list[SentenceSpan]:
    cuts: list[int] = []
    i = lo
    while i < hi:
        ch = line[i]
        if ch in ".!?":
            j = i
            while j + 1 < hi and line[j + 1] in ".!?":
                j += 1
            k = j + 1
            if k < hi and line[k].isspace():
                while k < hi and line[k].isspace():
                    k += 1
                nxt = line[k] if k < hi else ""
                if (nxt.isupper() or nxt.isdigit()) and not _is_protected_terminal(line, j):
                    cuts.append(j + 1)
            i = j + 1
        else:
            i += 1
    spans: list[SentenceSpan] = []
    start = lo
    for cut in cuts + [hi]:
        seg = line[start:cut]
        lead = len(seg) - len(seg.lstrip())
        trail = len(seg) - len(seg.rstrip())
        if seg.strip():
            spans.append(SentenceSpan(text=seg.strip(),
                                      start=offset + start + lead,
                                      end=offset + cut - trail))
        start = cut
    return spans


# --- LLM extraction --------------------------------------------------------------

_BLOCK_HEADER_RE = re.compile(r"^\[([a-z_]+)\]\s*$")


def parse_extraction_completion(completion: str) -> dict[SectionKind, str]:
    """Parse the [section_name] block format; unknown blocks are ignored.

    Raises MalformedCompletion when no known section block is present.
    """
    blocks: dict[SectionKind, list[str]] = {}
    current: SectionKind | None = None
    known = {k.value: k for k in SECTION_ORDER}
    for line in completion.splitlines():
        match = _BLOCK_HEADER_RE.match(line.strip())
        if match:
            current = known.get(match.group(1))
            if current is not None:
                blocks.setdefault(current, [])
            continue
        if current is not None:
            blocks[current].append(line)
    if not blocks:
        raise MalformedCompletion("completion has no recognizable section blocks")
    out: dict[SectionKind, str] = {}
    for kind, lines in blocks.items():
        content = "\n".join(lines).strip()
        if content.lower() in ("", "(none)", "none", "n/a"):
            content = ""
        out[kind] = content
    return out


def llm_extract_sections(summary: str, description: CleanedText,
                         gateway: ProviderGateway, catalog: PromptCatalog,
                         key: str = "") -> StructuredReport:
    """Conservative first-pass extraction through the provider gateway.

    Empty descriptions short-circuit to an all-Absent report without any
    provider call. Extracted content that is not a fuzzy substring of the
    source (summary + description, >= 0.9 token overlap) voids the whole
    completion: conservativeness is machine-checked, not assumed.
    """
    if not description.text.strip():
        return StructuredReport.empty(key)
    prompt = catalog.utility(EXTRACT_PROMPT_ID)
    request = ChatRequest(
        prompt_id=EXTRACT_PROMPT_ID,
        system_text=prompt.system_text,
        user_text=prompt.render(key=key, summary=summary, description=description.text),
        max_output_tokens=gateway.config.max_output_tokens,
    )
    completion = gateway.chat(request)
    extracted = parse_extraction_completion(completion)
    source = f"{clean_text(summary).text}\n{description.text}"
    sections: dict[SectionKind, Section] = {}
    for kind, content in extracted.items():
        if not content:
            continue
        overlap = token_overlap_ratio(content, source)
        if overlap < CONTENT_OVERLAP_MIN:
            raise MalformedCompletion(
                f"{key or '<report>'}: extracted {kind.value} is not grounded in the "
                f"source (overlap {overlap:.2f} < {CONTENT_OVERLAP_MIN})")
        sections[kind] = Section(content=content, provenance=Provenance.LLM_EXTRACTED)
    return StructuredReport.build(key, sections)


# --- heuristic extraction --------------------------------------------------------

def match_headers(text: str, rules: ExtractionRules) -> tuple[dict[SectionKind, str], set[int]]:
    """Stage 1: line-anchored header pattern matching.

    Returns verbatim content per section plus the set of claimed line
    indices (headers and their content regions).
    """
    patterns = rules.header_patterns()
    lines = text.split("\n")
    header_at: dict[int, tuple[SectionKind, str]] = {}
    for idx, line in enumerate(lines):
        if not line.strip():
            continue
        for kind, pattern in patterns.items():
            match = pattern.match(line)
            if match:
                rest = match.group("rest")
                # a bare header line has no separator and no inline content;
                # prose that merely starts with a header word does not match
                header_at[idx] = (kind, (rest or "").strip())
                break
    content: dict[SectionKind, str] = {}
    claimed: set[int] = set()
    header_lines = sorted(header_at)
    for pos, idx in enumerate(header_lines):
        kind, inline = header_at[idx]
        end = header_lines[pos + 1] if pos + 1 < len(header_lines) else len(lines)
        body_lines = [inline] if inline else []
        body_lines.extend(lines[idx + 1: end])
        body = "\n".join(l for l in body_lines if l.strip()).strip()
        claimed.update(range(idx, end))
        if body and kind not in content:
            content[kind] = body
    return content, claimed


def score_sentence(span: SentenceSpan, rules: ExtractionRules) -> HeuristicSignal:
    """Stage 2 cue voting for one sentence."""
    votes: dict[SectionKind, float] = {k: 0.0 for k in SECTION_ORDER}
    cues: list[str] = []
    text = span.text
    lowered = text.lower()
    tokens = re.findall(r"[a-z0-9']+", lowered)

    body = _LIST_ITEM_RE.sub("", text)
    if body != text:
        votes[SectionKind.STEPS_TO_REPRODUCE] += 1.0
        cues.append("list_marker")
    first = re.match(r"[a-z]+", body.lower())
    if first and first.group(0) in rules.s2r_action_verbs:
        votes[SectionKind.STEPS_TO_REPRODUCE] += 1.0
        cues.append(f"action_verb:{first.group(0)}")

    for tok in tokens:
        if tok in rules.ob_failure_verbs:
            votes[SectionKind.OBSERVED_BEHAVIOR] += 1.0
            cues.append(f"failure_verb:{tok}")
        if tok in rules.ob_negations:
            votes[SectionKind.OBSERVED_BEHAVIOR] += 1.0
            cues.append(f"negation:{tok}")
        if tok in rules.eb_modal_words:
            votes[SectionKind.EXPECTED_BEHAVIOR] += 1.0
            cues.append(f"modal:{tok}")
    for phrase in rules.eb_modal_phrases:
        if phrase in lowered:
            votes[SectionKind.EXPECTED_BEHAVIOR] += 1.0
            cues.append(f"modal:{phrase}")

    if _VERSION_RE.search(text):
        votes[SectionKind.ENVIRONMENT] += 1.0
        cues.append("version_number")
    for name in rules.env_os_names + rules.env_editions:
        if name in lowered:
            votes[SectionKind.ENVIRONMENT] += 1.0
            cues.append(f"platform:{name}")

    # domain terms only amplify an existing S2R signal, never create one
    if votes[SectionKind.STEPS_TO_REPRODUCE] > 0:
        hits = [t for t in tokens if t in rules.domain_terms]
        for term in hits[:2]:
            votes[SectionKind.STEPS_TO_REPRODUCE] += 0.25
            cues.append(f"domain:{term}")

    return HeuristicSignal(sentence=span, section_votes=votes, matched_cues=tuple(cues))


def _winning_section(signal: HeuristicSignal, threshold: float) -> SectionKind | None:
    ordered = sorted(signal.section_votes.items(), key=lambda kv: -kv[1])
    best_kind, best = ordered[0]
    runner_up = ordered[1][1] if len(ordered) > 1 else 0.0
    if best >= threshold and best > runner_up:
        return best_kind
    return None


def heuristic_extract_sections(summary: str, description: CleanedText,
                               partial: StructuredReport,
                               rules: ExtractionRules) -> StructuredReport:
    """Header matching, then cue voting, filling only Absent sections."""
    absent = [k for k in SECTION_ORDER
              if partial.sections[k].provenance is Provenance.ABSENT]
    if not absent:
        return partial

    sections = dict(partial.sections)
    header_content, claimed_lines = match_headers(description.text, rules)
    for kind, body in header_content.items():
        if sections[kind].provenance is Provenance.ABSENT:
            sections[kind] = Section(content=body, provenance=Provenance.HEADER_MATCHED)

    # stage 2: sentences outside header-claimed regions, plus the summary
    line_starts: list[int] = []
    pos = 0
    for line in description.text.split("\n"):
        line_starts.append(pos)
        pos += len(line) + 1

    def line_of(offset: int) -> int:
        idx = 0
        for i, start in enumerate(line_starts):
            if start <= offset:
                idx = i
        return idx

    candidates: list[SentenceSpan] = []
    summary_clean = clean_text(summary).text
    if summary_clean:
        candidates.extend(SentenceSpan(text=s.text, start=-1, end=-1)
                          for s in segment_sentences(CleanedText(text=summary_clean)))
    for span in segment_sentences(description):
        if line_of(span.start) not in claimed_lines:
            candidates.append(span)

    assigned: dict[SectionKind, list[str]] = {}
    for span in candidates:
        signal = score_sentence(span, rules)
        winner = _winning_section(signal, rules.vote_threshold)
        if winner is not None and sections[winner].provenance is Provenance.ABSENT:
            assigned.setdefault(winner, []).append(span.text)
    for kind, texts in assigned.items():
        sections[kind] = Section(content="\n".join(texts),
                                 provenance=Provenance.HEURISTIC_CLASSIFIED)
    return StructuredReport.build(partial.key, sections)


# --- metadata enrichment ----------------------------------------------------------

def enrich_metadata(report: StructuredReport, raw: RawBugReport) -> StructuredReport:
    """Append affected versions (and priority) to the Environment section."""
    lines = []
    if raw.affected_versions:
        lines.append("Affects: " + ", ".join(raw.affected_versions))
    if raw.priority:
        lines.append(f"Priority: {raw.priority}")
    if not lines:
        return report
    suffix = "\n".join(lines)
    env = report.sections[SectionKind.ENVIRONMENT]
    sections = dict(report.sections)
    if env.provenance is Provenance.ABSENT:
        sections[SectionKind.ENVIRONMENT] = Section(content=suffix,
                                                    provenance=Provenance.METADATA_ENRICHED)
    else:
        sections[SectionKind.ENVIRONMENT] = Section(content=f"{env.content}\n{suffix}",
                                                    provenance=env.provenance)
    return StructuredReport.build(report.key, sections)


# --- composition -------------------------------------------------------------------

@dataclass
class PreprocessOutcome:
    report: StructuredReport
    warnings: list[str] = field(default_factory=list)


def preprocess_report(raw: RawBugReport, gateway: ProviderGateway,
                      catalog: PromptCatalog, rules: ExtractionRules) -> PreprocessOutcome:
    """clean -> segment -> LLM extract -> heuristic fallback -> enrich.

    Extraction failures degrade to the heuristic path with a warning; the
    report is never dropped. Comments are deliberately not part of the
    extraction input.
    """
    cleaned = clean_text(raw.description)
    warnings: list[str] = []
    report = StructuredReport.empty(raw.key)
    try:
        report = llm_extract_sections(raw.summary, cleaned, gateway, catalog, key=raw.key)
    except MalformedCompletion as exc:
        warnings.append(f"extraction completion rejected: {exc}")
    except ProviderError as exc:
        warnings.append(f"extraction provider failure: {exc}")
    if any(report.sections[k].provenance is Provenance.ABSENT for k in SECTION_ORDER):
        report = heuristic_extract_sections(raw.summary, cleaned, report, rules)
    report = enrich_metadata(report, raw)
    if all(report.sections[k].provenance is Provenance.ABSENT for k in SECTION_ORDER):
        warnings.append("no section could be extracted; report emitted all-absent")
    return PreprocessOutcome(report=report, warnings=warnings)


# --- checkable properties ------------------------------------------------------------

_EXTRACTED_PROVENANCES = (Provenance.LLM_EXTRACTED, Provenance.HEADER_MATCHED,
                          Provenance.HEURISTIC_CLASSIFIED)


def strip_metadata_lines(content: str) -> str:
    """Drop enrichment lines before checking content preservation."""
    kept = [l for l in content.splitlines()
            if not l.startswith("Affects: ") and not l.startswith("Priority: ")]
    return "\n".join(kept)


def content_preservation_violations(report: StructuredReport, raw: RawBugReport,
                                    min_overlap: float = CONTENT_OVERLAP_MIN) -> list[str]:
    """Check that extracted section text originates from the cleaned source."""
    source = f"{clean_text(raw.summary).text}\n{clean_text(raw.description).text}"
    violations = []
    for kind, sec in report.sections.items():
        if sec.provenance not in _EXTRACTED_PROVENANCES or not sec.content.strip():
            continue
        body = strip_metadata_lines(sec.content) if kind is SectionKind.ENVIRONMENT else sec.content
        ratio = token_overlap_ratio(body, source)
        if ratio < min_overlap:
            violations.append(f"{report.key}: {kind.value} overlap {ratio:.3f} < {min_overlap}")
    return violations
