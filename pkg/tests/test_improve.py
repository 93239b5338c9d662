import pytest

from brqual.errors import CatalogMissing, SlotOverflow, UnparseableOutput
from brqual.improve import (AblationConfig, FEWSHOT_HEADER, FINDINGS_HEADER,
                            KNOWLEDGE_HEADER, ImprovedReport, ImprovementRecord,
                            assemble_prompt, improve_report, improve_section,
                            parse_steps_completion, select_template)
from brqual.model import (DetectionResult, FlagSource, IssueClass, IssueFlag,
                          Provenance, Section, SectionKind, StructuredReport,
                          Verdict)
from brqual.rag import KnowledgeChunk, RetrievalResult, VectorIndex
from tests.conftest import ScriptedChatTransport, pseudo_embedding, record_gateway

S2R = SectionKind.STEPS_TO_REPRODUCE
OB = SectionKind.OBSERVED_BEHAVIOR
EB = SectionKind.EXPECTED_BEHAVIOR


def _flag(section, issue_class, source=FlagSource.HEURISTIC):
    return IssueFlag(section=section, issue_class=issue_class,
                     detail="detail", source=source)


def _detection(key="R-1", flags=(), score=0.2):
    return DetectionResult(key=key, verdict=Verdict.FAIL if flags else Verdict.PASS,
                           classifier_score=score, flags=tuple(flags),
                           recommendations=("add missing info",) if flags else (),
                           llm_invoked=bool(flags))


def _report(key="R-1"):
    return StructuredReport.build(key, {
        OB: Section("the hopper did nothing at all", Provenance.HEADER_MATCHED),
    })


def _index(n=16):
    chunks = [KnowledgeChunk(chunk_id=f"k{i:03d}", source_title=f"Wiki {i}",
                             source_url="u", text=f"knowledge text {i} about hoppers",
                             embedding=tuple(pseudo_embedding(f"k{i}", 8)))
              for i in range(n)]
    return VectorIndex(chunks=chunks, dimension=8)


def _retrieval(index, keep=15):
    selected = tuple({"chunk_id": c.chunk_id, "rerank_score": 1.0 - i * 0.01}
                     for i, c in enumerate(index.chunks[:keep]))
    candidates = tuple({"chunk_id": c.chunk_id, "similarity": 0.9}
                       for c in index.chunks)
    return RetrievalResult(queries=("q",), candidates=candidates, selected=selected)


# --- template selection ---------------------------------------------------------

def test_select_template_severity_order(catalog):
    flags = [_flag(S2R, IssueClass.AMBIGUOUS), _flag(S2R, IssueClass.MISSING)]
    template = select_template(catalog, S2R, flags)
    assert template.issue_class is IssueClass.MISSING


def test_select_template_no_flags_skips(catalog):
    assert select_template(catalog, OB, [_flag(S2R, IssueClass.MISSING)]) is None


def test_select_template_enhance(catalog):
    template = select_template(catalog, EB, [_flag(EB, IssueClass.ENHANCE)])
    assert template.issue_class is IssueClass.ENHANCE


def test_catalog_missing_combination(catalog):
    with pytest.raises(CatalogMissing):
        catalog.improvement(SectionKind.ENVIRONMENT, IssueClass.MISSING)


# --- prompt assembly --------------------------------------------------------------

def test_assemble_all_on_has_all_blocks(catalog):
    index = _index()
    retrieval = _retrieval(index)
    template = catalog.improvement(S2R, IssueClass.MISSING)
    request = assemble_prompt(template, _report(), _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                              retrieval, index, AblationConfig())
    text = request.system_text + "\n" + request.user_text
    assert KNOWLEDGE_HEADER in text
    assert FINDINGS_HEADER in text
    assert FEWSHOT_HEADER in text
    assert text.count("knowledge text") == 15  # all 15 numbered blocks, rank order
    first = request.user_text.index("knowledge text 0")
    last = request.user_text.index("knowledge text 14")
    assert first < last


def test_assemble_no_rag_has_no_knowledge_header(catalog):
    template = catalog.improvement(S2R, IssueClass.MISSING)
    request = assemble_prompt(template, _report(),
                              _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                              None, None, AblationConfig(rag=False))
    text = request.system_text + "\n" + request.user_text
    assert KNOWLEDGE_HEADER not in text
    assert "knowledge text" not in text


def test_assemble_no_detector_and_no_fewshot(catalog):
    index = _index()
    template = catalog.improvement(EB, IssueClass.ENHANCE)
    request = assemble_prompt(template, _report(), _detection(flags=[_flag(EB, IssueClass.ENHANCE)]),
                              _retrieval(index), index,
                              AblationConfig(detector=False, few_shot=False))
    text = request.system_text + "\n" + request.user_text
    assert FINDINGS_HEADER not in text
    assert FEWSHOT_HEADER not in text
    assert KNOWLEDGE_HEADER in text


def test_assemble_budget_drops_tail_blocks(catalog):
    index = _index()
    retrieval = _retrieval(index)
    template = catalog.improvement(S2R, IssueClass.MISSING)
    fits_all = assemble_prompt(template, _report(),
                               _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                               retrieval, index, AblationConfig(), token_budget=100000)
    full_tokens = len((fits_all.system_text + " " + fits_all.user_text).split())
    # each numbered block is 8 whitespace tokens; force exactly three tail drops
    request = assemble_prompt(template, _report(),
                              _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                              retrieval, index, AblationConfig(),
                              token_budget=full_tokens - 17)
    text = request.user_text
    assert "knowledge text 11" in text and "knowledge text 12" not in text
    assert "knowledge text 14" not in text
    for i in range(12):
        assert f"knowledge text {i} " in text or f"knowledge text {i}\n" in text


def test_assemble_overflow_raises_when_nothing_fits(catalog):
    template = catalog.improvement(S2R, IssueClass.MISSING)
    with pytest.raises(SlotOverflow):
        assemble_prompt(template, _report(),
                        _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                        None, None, AblationConfig(rag=False), token_budget=5)


def test_assemble_section_isolation(catalog):
    # the target section's text is not leaked into report_context
    template = catalog.improvement(OB, IssueClass.ENHANCE)
    report = StructuredReport.build("R-1", {
        OB: Section("observed text here words", Provenance.HEADER_MATCHED),
        EB: Section("expected text here words", Provenance.HEADER_MATCHED),
    })
    request = assemble_prompt(template, report, _detection(flags=[_flag(OB, IssueClass.ENHANCE)]),
                              None, None, AblationConfig(rag=False))
    context = request.user_text.split("Current observed behavior:")[0]
    assert "expected_behavior:" in request.user_text
    assert "observed_behavior:\n" not in context


# --- section improvement -------------------------------------------------------------

def test_parse_steps_completion():
    assert parse_steps_completion("1. Open world\n2. Place hopper\n3. Observe") == \
        ["Open world", "Place hopper", "Observe"]
    assert parse_steps_completion("free prose, not steps") == []


def test_improve_section_s2r_from_fixture_completion(tmp_path, catalog):
    template = catalog.improvement(S2R, IssueClass.MISSING)
    gw = record_gateway(tmp_path, ScriptedChatTransport(
        default="1. Open world\n2. Place hopper\n3. Observe"))
    request = assemble_prompt(template, _report(), _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                              None, None, AblationConfig(rag=False))
    record = improve_section(S2R, template, request, gw, before="", retrieved_chunk_ids=(),
                             ablation=AblationConfig(rag=False))
    assert record.after == "1. Open world\n2. Place hopper\n3. Observe"
    assert record.error is None
    assert record.request_hash


def test_improve_section_s2r_prose_retries_then_fails(tmp_path, catalog):
    template = catalog.improvement(S2R, IssueClass.MISSING)
    transport = ScriptedChatTransport(default="just prose, no steps at all")
    gw = record_gateway(tmp_path, transport)
    request = assemble_prompt(template, _report(), _detection(flags=[_flag(S2R, IssueClass.MISSING)]),
                              None, None, AblationConfig(rag=False))
    with pytest.raises(UnparseableOutput):
        improve_section(S2R, template, request, gw, before="", retrieved_chunk_ids=(),
                        ablation=AblationConfig(rag=False))
    assert len(transport.chat_calls) == 2  # initial + one format retry
    assert "Reminder" in transport.chat_calls[1]["user"]


def test_improve_section_ob_free_text(tmp_path, catalog):
    template = catalog.improvement(OB, IssueClass.MISSING)
    gw = record_gateway(tmp_path, ScriptedChatTransport(default="  The lid stays shut.  "))
    request = assemble_prompt(template, _report("R-2"), _detection(flags=[_flag(OB, IssueClass.MISSING)]),
                              None, None, AblationConfig(rag=False))
    record = improve_section(OB, template, request, gw, before="", retrieved_chunk_ids=(),
                             ablation=AblationConfig(rag=False))
    assert record.after == "The lid stays shut."


# --- report improvement ----------------------------------------------------------------

IMPROVE_RESPONSES = {
    "enumerated list": "1. Launch the game\n2. Repeat the trigger\n3. Watch the result",
}


def _improve_gateway(tmp_path, name="cache.jsonl"):
    transport = ScriptedChatTransport(
        responses={"steps": "1. Launch the game\n2. Repeat the trigger\n3. Watch the result"},
        default="Generated section text for the report.")
    return record_gateway(tmp_path, transport, name=name, embed_dim=8), transport


def test_improve_report_noop_on_pass(tmp_path, catalog):
    gw, transport = _improve_gateway(tmp_path)
    report = _report()
    improved = improve_report(report, _detection(flags=()), gw, None, catalog,
                              AblationConfig())
    assert improved.base == report
    assert improved.records == ()
    assert transport.chat_calls == []
    assert gw.call_log == []


def test_improve_report_single_flagged_section(tmp_path, catalog):
    gw, _ = _improve_gateway(tmp_path)
    report = _report()
    detection = _detection(flags=[_flag(EB, IssueClass.MISSING)])
    improved = improve_report(report, detection, gw, None, catalog,
                              AblationConfig(rag=False))
    generated = [k for k, s in improved.base.sections.items()
                 if s.provenance is Provenance.GENERATED]
    assert generated == [EB]
    assert len(improved.records) == 1
    assert improved.records[0].before == ""
    assert improved.records[0].after
    # untouched sections keep their provenance and content
    assert improved.base.sections[OB] == report.sections[OB]


def test_improve_report_no_detector_improves_all_three(tmp_path, catalog):
    gw, _ = _improve_gateway(tmp_path)
    improved = improve_report(_report(), _detection(flags=()), gw, None, catalog,
                              AblationConfig(rag=False, detector=False))
    assert len(improved.records) == 3
    assert {r.section for r in improved.records} == {S2R, OB, EB}
    assert all(r.issue_class is IssueClass.ENHANCE for r in improved.records)
    assert all(r.prompt_id.endswith("enhance.v1") for r in improved.records)


def test_improve_report_environment_never_touched(tmp_path, catalog):
    gw, _ = _improve_gateway(tmp_path)
    report = StructuredReport.build("R-1", {
        SectionKind.ENVIRONMENT: Section("Affects: 1.21.4", Provenance.METADATA_ENRICHED)})
    flags = [_flag(SectionKind.ENVIRONMENT, IssueClass.MISSING),
             _flag(EB, IssueClass.MISSING)]
    improved = improve_report(report, _detection(flags=flags), gw, None, catalog,
                              AblationConfig(rag=False))
    assert improved.base.sections[SectionKind.ENVIRONMENT] == \
        report.sections[SectionKind.ENVIRONMENT]
    assert {r.section for r in improved.records} == {EB}


def test_improve_report_shares_one_retrieval(tmp_path, catalog):
    transport = ScriptedChatTransport(
        responses={"Write the missing steps": "1. Do the thing\n2. Do it again",
                   "query": "hopper wiki\nchest mechanics"},
        default="Generated text for this section of the report.", dim=8)
    gw = record_gateway(tmp_path, transport, embed_dim=8)
    index = _index()
    flags = [_flag(S2R, IssueClass.MISSING), _flag(EB, IssueClass.MISSING)]
    improved = improve_report(_report(), _detection(flags=flags), gw, index, catalog,
                              AblationConfig(), summary="hopper bug",
                              description="the hopper is stuck")
    querygen_calls = [c for c in gw.call_log if c.prompt_id == "rag.querygen.v1"]
    assert len(querygen_calls) == 1
    assert len(improved.records) == 2
    ids0 = improved.records[0].retrieved_chunk_ids
    assert ids0 and ids0 == improved.records[1].retrieved_chunk_ids


def test_improve_report_records_failures_and_proceeds(tmp_path, catalog):
    transport = ScriptedChatTransport(
        responses={"Write the missing steps": "prose that never parses as steps"},
        default="Generated expected behavior text.")
    gw = record_gateway(tmp_path, transport, embed_dim=8)
    flags = [_flag(S2R, IssueClass.MISSING), _flag(EB, IssueClass.MISSING)]
    improved = improve_report(_report(), _detection(flags=flags), gw, None, catalog,
                              AblationConfig(rag=False))
    by_section = {r.section: r for r in improved.records}
    assert by_section[S2R].error is not None
    assert by_section[S2R].after == ""
    assert by_section[EB].error is None
    # failed section keeps its original (absent) state
    assert improved.base.sections[S2R].provenance is Provenance.ABSENT
    assert improved.base.sections[EB].provenance is Provenance.GENERATED


def test_improved_report_roundtrip(tmp_path, catalog):
    gw, _ = _improve_gateway(tmp_path)
    detection = _detection(flags=[_flag(EB, IssueClass.MISSING)])
    improved = improve_report(_report(), detection, gw, None, catalog,
                              AblationConfig(rag=False))
    assert ImprovedReport.from_dict(improved.to_dict()) == improved
