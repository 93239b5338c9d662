"""Prompt catalog: template files with YAML front-matter and slotted bodies.

Improvement templates carry (section, issue_class) routing plus contrastive
few-shot pairs; utility prompts (extraction, analysis, query generation) are
plain slotted templates addressed by prompt_id. Slots are rendered with a
literal `{name}` replacement, so braces inside substituted values or example
text never break rendering.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import CatalogMissing, ConfigError
from .model import IssueClass, SectionKind

IMPROVE_SLOTS = ("report_context", "detector_findings", "retrieved_knowledge")

_FRONT_MATTER_RE = re.compile(r"\A---\s*\n(.*?)\n---\s*\n", re.DOTALL)


def render_slots(body: str, values: dict[str, str]) -> str:
    """Replace each {name} placeholder; other braces are left untouched."""
    out = body
    for name, value in values.items():
        out = out.replace("{" + name + "}", value)
    return out


def slot_count(body: str, name: str) -> int:
    return body.count("{" + name + "}")


@dataclass(frozen=True)
class FewShotPair:
    bad_example: str
    good_example: str


@dataclass(frozen=True)
class PromptTemplate:
    """A section-specific improvement template."""

    prompt_id: str
    section: SectionKind
    issue_class: IssueClass
    system_text: str
    few_shot_pairs: tuple[FewShotPair, ...]
    body: str


@dataclass(frozen=True)
class UtilityPrompt:
    prompt_id: str
    system_text: str
    body: str

    def render(self, **values: str) -> str:
        return render_slots(self.body, values)


def _parse_file(path: Path) -> tuple[dict, str]:
    text = path.read_text(encoding="utf-8")
    match = _FRONT_MATTER_RE.match(text)
    if not match:
        raise ConfigError(f"{path}: missing front-matter block")
    meta = yaml.safe_load(match.group(1)) or {}
    body = text[match.end():].strip("\n")
    return meta, body


class PromptCatalog:
    """All templates under one directory, loaded eagerly and validated."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._improve: dict[tuple[SectionKind, IssueClass], PromptTemplate] = {}
        self._utility: dict[str, UtilityPrompt] = {}
        if not self.directory.is_dir():
            raise ConfigError(f"prompt catalog directory not found: {self.directory}")
        for path in sorted(self.directory.glob("*.md")):
            meta, body = _parse_file(path)
            prompt_id = meta.get("prompt_id")
            if not prompt_id:
                raise ConfigError(f"{path}: front-matter lacks prompt_id")
            if "section" in meta:
                self._load_improve(path, meta, body)
            else:
                self._utility[prompt_id] = UtilityPrompt(
                    prompt_id=prompt_id,
                    system_text=(meta.get("system") or "").strip(),
                    body=body)

    def _load_improve(self, path: Path, meta: dict, body: str) -> None:
        section = SectionKind(meta["section"])
        issue_class = IssueClass(meta["issue_class"])
        pairs = tuple(FewShotPair(bad_example=p["bad"].strip(), good_example=p["good"].strip())
                      for p in meta.get("few_shot", []))
        if not pairs:
            raise ConfigError(f"{path}: improvement template needs >= 1 few-shot pair")
        for slot in IMPROVE_SLOTS:
            if slot_count(body, slot) != 1:
                raise ConfigError(f"{path}: slot {{{slot}}} must appear exactly once")
        template = PromptTemplate(prompt_id=meta["prompt_id"], section=section,
                                  issue_class=issue_class,
                                  system_text=(meta.get("system") or "").strip(),
                                  few_shot_pairs=pairs, body=body)
        self._improve[(section, issue_class)] = template

    def utility(self, prompt_id: str) -> UtilityPrompt:
        prompt = self._utility.get(prompt_id)
        if prompt is None:
            raise CatalogMissing(f"no prompt with id {prompt_id!r} in {self.directory}")
        return prompt

    def improvement(self, section: SectionKind, issue_class: IssueClass) -> PromptTemplate:
        template = self._improve.get((section, issue_class))
        if template is None:
            raise CatalogMissing(
                f"no improvement template for ({section.value}, {issue_class.value})")
        return template

    def improvement_templates(self) -> list[PromptTemplate]:
        return list(self._improve.values())


def default_catalog_dir() -> Path:
    return Path(__file__).parent / "data" / "prompts"
