"""Generate improved S2R, OB, and EB sections with section-specific few-shot
prompts, guided by detector flags and grounded in retrieved knowledge.

Ablation switches mirror the component study: --no-rag drops the knowledge
blocks, --no-detector improves all three sections unconditionally with the
Enhance template (no guidance about what is wrong), --no-fewshot drops the
contrastive examples. Environment is never generated.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

from .errors import ProviderError, SlotOverflow, UnparseableOutput
from .gateway import ChatRequest, ProviderGateway, canonical_request, request_hash
from .model import (DetectionResult, IssueClass, Provenance, REQUIRED_SECTIONS,
                    SECTION_ORDER, Section, SectionKind, StructuredReport)
from .prompts import PromptCatalog, PromptTemplate, render_slots
from .rag import RetrievalResult, VectorIndex, run_retrieval

logger = logging.getLogger(__name__)

KNOWLEDGE_HEADER = "### Retrieved knowledge"
FINDINGS_HEADER = "### Detector findings"
FEWSHOT_HEADER = "### Contrastive examples"

SEVERITY_ORDER = (IssueClass.MISSING, IssueClass.INCOMPLETE,
                  IssueClass.AMBIGUOUS, IssueClass.ENHANCE)

_STEP_LINE_RE = re.compile(r"^\s*\d+[.)]\s+(.+)$")
_RETRY_SUFFIX = ("\n\nReminder: output only an enumerated list of steps, "
                 "one per line, formatted like '1. ...'.")


@dataclass(frozen=True)
class AblationConfig:
    rag: bool = True
    detector: bool = True
    few_shot: bool = True

    def to_dict(self) -> dict[str, bool]:
        return {"rag": self.rag, "detector": self.detector, "few_shot": self.few_shot}

    @classmethod
    def from_dict(cls, d: dict[str, bool]) -> "AblationConfig":
        return cls(rag=d["rag"], detector=d["detector"], few_shot=d["few_shot"])


@dataclass(frozen=True)
class ImprovementRecord:
    section: SectionKind
    issue_class: IssueClass
    prompt_id: str
    retrieved_chunk_ids: tuple[str, ...]
    before: str
    after: str
    ablation_config: AblationConfig
    request_hash: str = ""
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "section": self.section.value,
            "issue_class": self.issue_class.value,
            "prompt_id": self.prompt_id,
            "retrieved_chunk_ids": list(self.retrieved_chunk_ids),
            "before": self.before,
            "after": self.after,
            "ablation_config": self.ablation_config.to_dict(),
            "request_hash": self.request_hash,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ImprovementRecord":
        return cls(section=SectionKind(d["section"]),
                   issue_class=IssueClass(d["issue_class"]),
                   prompt_id=d["prompt_id"],
                   retrieved_chunk_ids=tuple(d.get("retrieved_chunk_ids", [])),
                   before=d["before"], after=d["after"],
                   ablation_config=AblationConfig.from_dict(d["ablation_config"]),
                   request_hash=d.get("request_hash", ""),
                   error=d.get("error"))


@dataclass(frozen=True)
class ImprovedReport:
    base: StructuredReport
    records: tuple[ImprovementRecord, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"base": self.base.to_dict(),
                "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ImprovedReport":
        return cls(base=StructuredReport.from_dict(d["base"]),
                   records=tuple(ImprovementRecord.from_dict(r)
                                 for r in d.get("records", [])))


def select_template(catalog: PromptCatalog, section: SectionKind,
                    flags: Sequence[Any]) -> PromptTemplate | None:
    """Template for the most severe issue class flagged against `section`.

    Severity: missing > incomplete > ambiguous > enhance. No flag for the
    section means the section is skipped (returns None); a flagged
    combination with no template is a configuration error.
    """
    classes = {f.issue_class for f in flags if f.section == section}
    if not classes:
        return None
    for issue_class in SEVERITY_ORDER:
        if issue_class in classes:
            return catalog.improvement(section, issue_class)
    return None


def _estimate_tokens(text: str) -> int:
    return len(text.split())


def _knowledge_blocks(retrieval: RetrievalResult, index: VectorIndex) -> list[str]:
    blocks = []
    for i, sel in enumerate(retrieval.selected, start=1):
        chunk = index.chunk(sel["chunk_id"])
        blocks.append(f"{i}. ({chunk.source_title}) {chunk.text}")
    return blocks


def _render_findings(detection: DetectionResult) -> str:
    lines = [f"- {f.section.value} {f.issue_class.value}: {f.detail}"
             for f in detection.flags]
    if detection.recommendations:
        lines.append("Recommendations:")
        lines.extend(f"- {r}" for r in detection.recommendations)
    return "\n".join(lines)


def assemble_prompt(template: PromptTemplate, report: StructuredReport,
                    detection: DetectionResult, retrieval: RetrievalResult | None,
                    index: VectorIndex | None, ablation: AblationConfig,
                    token_budget: int = 8000,
                    max_output_tokens: int = 1024) -> ChatRequest:
    """Fill the template slots into a ChatRequest.

    Knowledge blocks appear numbered in descending relevance and are
    dropped from the tail if the assembled prompt exceeds the token budget;
    if it still does not fit with zero blocks, SlotOverflow is raised.
    """
    if ablation.rag and (retrieval is None or index is None):
        raise ValueError("ablation.rag=True requires retrieval and index")
    context_parts = []
    for kind in SECTION_ORDER:
        sec = report.sections.get(kind)
        if kind is template.section or sec is None or not sec.content.strip():
            continue
        context_parts.append(f"{kind.value}:\n{sec.content}")
    report_context = "\n\n".join(context_parts)

    findings = ""
    if ablation.detector:
        rendered = _render_findings(detection)
        if rendered:
            findings = f"{FINDINGS_HEADER}\n{rendered}"

    system_text = template.system_text
    if ablation.few_shot and template.few_shot_pairs:
        shots = [FEWSHOT_HEADER]
        for pair in template.few_shot_pairs:
            shots.append(f"Poor example:\n{pair.bad_example}")
            shots.append(f"Improved example:\n{pair.good_example}")
        system_text = system_text + "\n\n" + "\n\n".join(shots)

    blocks = _knowledge_blocks(retrieval, index) if ablation.rag and retrieval else []

    def build(selected_blocks: list[str]) -> ChatRequest:
        knowledge = ""
        if ablation.rag and selected_blocks:
            knowledge = KNOWLEDGE_HEADER + "\n" + "\n".join(selected_blocks)
        values = {
            "report_context": report_context,
            "detector_findings": findings,
            "retrieved_knowledge": knowledge,
            "current_section": report.section_text(template.section),
        }
        return ChatRequest(prompt_id=template.prompt_id,
                           system_text=system_text,
                           user_text=render_slots(template.body, values),
                           max_output_tokens=max_output_tokens)

    request = build(blocks)
    while blocks and _estimate_tokens(request.system_text + " " + request.user_text) > token_budget:
        blocks = blocks[:-1]
        request = build(blocks)
    if _estimate_tokens(request.system_text + " " + request.user_text) > token_budget:
        raise SlotOverflow(f"prompt for {template.prompt_id} exceeds token budget "
                           f"{token_budget} even with no knowledge blocks")
    return request


def parse_steps_completion(completion: str) -> list[str]:
    """Extract enumerated steps; returns [] when the output is not a list."""
    steps = []
    for line in completion.splitlines():
        match = _STEP_LINE_RE.match(line)
        if match:
            steps.append(match.group(1).strip())
    return steps


def improve_section(section: SectionKind, template: PromptTemplate,
                    assembled: ChatRequest, gateway: ProviderGateway,
                    before: str, retrieved_chunk_ids: Sequence[str],
                    ablation: AblationConfig) -> ImprovementRecord:
    """Run one section improvement, with one format retry for bad output.

    S2R completions must parse as an enumerated step list; OB and EB are
    free text but must be non-empty. A second malformed completion raises
    UnparseableOutput.
    """
    request = assembled
    for attempt in range(2):
        completion = gateway.chat(request)
        if section is SectionKind.STEPS_TO_REPRODUCE:
            steps = parse_steps_completion(completion)
            after = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))
            ok = bool(steps)
        else:
            after = completion.strip()
            ok = bool(after)
        if ok:
            canonical = canonical_request("chat", {
                "model": gateway.config.chat_model, "prompt_id": request.prompt_id,
                "system": request.system_text, "user": request.user_text,
                "temperature": request.temperature,
                "max_output_tokens": request.max_output_tokens})
            return ImprovementRecord(section=section, issue_class=template.issue_class,
                                     prompt_id=template.prompt_id,
                                     retrieved_chunk_ids=tuple(retrieved_chunk_ids),
                                     before=before, after=after,
                                     ablation_config=ablation,
                                     request_hash=request_hash(canonical))
        if attempt == 0:
            request = ChatRequest(prompt_id=request.prompt_id,
                                  system_text=request.system_text,
                                  user_text=request.user_text + _RETRY_SUFFIX,
                                  temperature=request.temperature,
                                  max_output_tokens=request.max_output_tokens)
    raise UnparseableOutput(f"{section.value}: completion failed the format "
                            f"contract after one retry")


def improve_report(report: StructuredReport, detection: DetectionResult,
                   gateway: ProviderGateway, index: VectorIndex | None,
                   catalog: PromptCatalog, ablation: AblationConfig,
                   summary: str = "", description: str = "",
                   pool_size: int = 40, keep: int = 15,
                   token_budget: int = 8000) -> ImprovedReport:
    """Improve every flagged section among S2R, OB, EB.

    Retrieval runs once per report and is shared across sections. With the
    detector ablated, all three sections are improved unconditionally with
    the Enhance template. Per-section failures are recorded and the other
    sections proceed; only a gateway outage fails the whole report.
    """
    if detection.key != report.key:
        raise ValueError(f"detection {detection.key} does not match report {report.key}")

    plan: list[tuple[SectionKind, PromptTemplate]] = []
    for kind in REQUIRED_SECTIONS:
        if ablation.detector:
            template = select_template(catalog, kind, detection.flags)
        else:
            template = catalog.improvement(kind, IssueClass.ENHANCE)
        if template is not None:
            plan.append((kind, template))

    if not plan:
        return ImprovedReport(base=report, records=())

    retrieval: RetrievalResult | None = None
    chunk_ids: tuple[str, ...] = ()
    if ablation.rag:
        if index is None:
            raise ValueError("rag enabled but no index supplied")
        retrieval = run_retrieval(index, summary, description, gateway, catalog,
                                  pool_size=pool_size, keep=keep)
        chunk_ids = tuple(retrieval.selected_ids())

    sections = dict(report.sections)
    records: list[ImprovementRecord] = []
    for kind, template in plan:
        before = report.section_text(kind)
        request = assemble_prompt(template, report, detection, retrieval, index,
                                  ablation, token_budget=token_budget,
                                  max_output_tokens=gateway.config.max_output_tokens)
        try:
            record = improve_section(kind, template, request, gateway, before,
                                     chunk_ids, ablation)
        except UnparseableOutput as exc:
            logger.warning("%s: %s", report.key, exc)
            records.append(ImprovementRecord(
                section=kind, issue_class=template.issue_class,
                prompt_id=template.prompt_id, retrieved_chunk_ids=chunk_ids,
                before=before, after="", ablation_config=ablation,
                error=str(exc)))
            continue
        sections[kind] = Section(content=record.after, provenance=Provenance.GENERATED)
        records.append(record)

    return ImprovedReport(base=StructuredReport.build(report.key, sections),
                          records=tuple(records))
