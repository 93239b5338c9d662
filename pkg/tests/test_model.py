import random
from datetime import datetime, timezone

import pytest

from brqual.model import (Comment, DetectionResult, FlagSource, IssueClass,
                          IssueFlag, Provenance, RawBugReport, Section,
                          SectionKind, SECTION_ORDER, StructuredReport, Verdict,
                          format_timestamp, parse_steps, parse_timestamp,
                          validate_structured_report)


def test_parse_timestamp_truncates_and_normalizes():
    dt = parse_timestamp("2025-03-10T09:00:00.789+0000")
    assert dt == datetime(2025, 3, 10, 9, 0, 0, tzinfo=timezone.utc)
    assert parse_timestamp("2025-03-10T11:00:00+02:00") == datetime(
        2025, 3, 10, 9, 0, 0, tzinfo=timezone.utc)
    assert format_timestamp(dt) == "2025-03-10T09:00:00Z"


def test_raw_report_invariants():
    created = parse_timestamp("2025-03-10T09:00:00Z")
    with pytest.raises(ValueError):
        RawBugReport(key="", summary="s", description="", created=created,
                     updated=created, status="Open")
    with pytest.raises(ValueError):
        RawBugReport(key="A-1", summary="s", description="", created=created,
                     updated=parse_timestamp("2025-03-09T09:00:00Z"), status="Open")


def _sample_raw() -> RawBugReport:
    return RawBugReport(
        key="MC-1", summary="summary", description="desc",
        created=parse_timestamp("2025-03-10T09:00:00Z"),
        updated=parse_timestamp("2025-03-11T09:00:00Z"),
        status="Resolved", resolution="Fixed",
        comments=(Comment("a", "b", parse_timestamp("2025-03-10T10:00:00Z")),),
        affected_versions=("1.21.4",), priority="Normal")


def test_raw_report_roundtrip():
    report = _sample_raw()
    assert RawBugReport.from_dict(report.to_dict()) == report


def test_structured_report_roundtrip_and_canonical_order():
    report = StructuredReport.build("MC-2", {
        SectionKind.STEPS_TO_REPRODUCE: Section("1. do a thing", Provenance.HEADER_MATCHED),
        SectionKind.OBSERVED_BEHAVIOR: Section("it broke badly", Provenance.HEURISTIC_CLASSIFIED),
    })
    back = StructuredReport.from_dict(report.to_dict())
    assert back == report
    assert list(back.sections) == list(SECTION_ORDER)


def test_detection_result_roundtrip():
    result = DetectionResult(
        key="MC-3", verdict=Verdict.FAIL, classifier_score=0.75,
        flags=(IssueFlag(SectionKind.EXPECTED_BEHAVIOR, IssueClass.MISSING,
                         "EB absent", FlagSource.HEURISTIC),),
        recommendations=("add EB",), llm_invoked=True)
    assert DetectionResult.from_dict(result.to_dict()) == result


def test_parse_steps():
    assert parse_steps("") == ()
    assert parse_steps("1. open\n2. close") == ("open", "close")
    assert parse_steps("- first\n- second") == ("first", "second")
    assert parse_steps("just one blob of text") == ("just one blob of text",)


def test_validate_minimal_absent_report_is_valid():
    assert validate_structured_report(StructuredReport.empty("K-1")) == []


def test_validate_missing_section_key():
    report = StructuredReport.empty("K-2")
    sections = dict(report.sections)
    del sections[SectionKind.ENVIRONMENT]
    broken = StructuredReport(key="K-2", sections=sections)
    assert "missing section key: Environment" in validate_structured_report(broken)


def test_validate_s2r_steps_inconsistency():
    # constructed by hand: non-empty S2R content but no parsed steps
    report = StructuredReport(
        key="K-3",
        sections={**StructuredReport.empty("K-3").sections,
                  SectionKind.STEPS_TO_REPRODUCE:
                      Section("1. open the door", Provenance.HEADER_MATCHED)},
        s2r_steps=())
    violations = validate_structured_report(report)
    assert "s2r_steps inconsistent with S2R content" in violations


def test_validate_provenance_content_consistency():
    report = StructuredReport(
        key="K-4",
        sections={**StructuredReport.empty("K-4").sections,
                  SectionKind.OBSERVED_BEHAVIOR: Section("", Provenance.HEADER_MATCHED)})
    assert any("empty content" in v for v in validate_structured_report(report))


def test_roundtrip_fuzz():
    rng = random.Random(7)
    kinds = list(SECTION_ORDER)
    for _ in range(50):
        sections = {}
        for kind in kinds:
            if rng.random() < 0.5:
                sections[kind] = Section(f"text {rng.randint(0, 999)}",
                                         Provenance.HEURISTIC_CLASSIFIED)
        report = StructuredReport.build(f"K-{rng.randint(0, 99)}", sections)
        assert StructuredReport.from_dict(report.to_dict()) == report


def test_manual_label_and_cache_entry_roundtrip():
    from brqual.evaluate import ManualLabel
    from brqual.gateway import CacheEntry

    label = ManualLabel(key="K-9", version="improved", annotator="ann-a",
                        s2r_label="executable.reproducible.valid",
                        ob_label=None, eb_label="present.accurate")
    assert ManualLabel.from_dict(label.to_dict()) == label

    entry = CacheEntry(request_hash="h", request_body="rb", response_body="resp",
                       recorded_at="2025-08-01T00:00:00Z")
    assert CacheEntry.from_dict(entry.to_dict()) == entry
