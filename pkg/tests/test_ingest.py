import json
import math
import random

import pytest

from brqual.errors import EmptyPopulation, SchemaError
from brqual.ingest import (FetchQuery, FixtureTracker, StratumSpec,
                           apportion_counts, fetch_reports,
                           filter_target_resolutions, map_issue_payload,
                           margin_of_error, resolution_stratum,
                           stratified_sample)
from brqual.model import RawBugReport, parse_timestamp
from tests.conftest import FIXTURES

TABLE1_POPULATION = {
    "Duplicate": 8720, "Invalid": 5087, "Null (Open)": 2862, "Fixed": 2807,
    "Awaiting Response": 2629, "Works As Intended": 1373, "Won't Fix": 669,
    "Cannot Reproduce": 450, "Incomplete": 401,
}
TABLE1_COUNTS = {
    "Duplicate": 348, "Invalid": 203, "Null (Open)": 114, "Fixed": 112,
    "Awaiting Response": 105, "Works As Intended": 54, "Won't Fix": 26,
    "Cannot Reproduce": 18, "Incomplete": 16,
}


def _payload(key="MC-1", **overrides):
    fields = {
        "summary": "a summary",
        "description": "a description",
        "created": "2025-03-10T09:00:00.000+0000",
        "updated": "2025-03-11T09:00:00.000+0000",
        "status": {"name": "Open"},
        "resolution": None,
    }
    fields.update(overrides)
    return {"key": key, "fields": fields}


def test_map_payload_full_field_set():
    payload = _payload(resolution={"name": "Fixed"},
                       versions=[{"name": "1.21.4"}],
                       priority={"name": "Low"},
                       comment={"comments": [{"author": {"displayName": "who"},
                                              "body": "hi",
                                              "created": "2025-03-10T10:00:00.000+0000"}]},
                       issuelinks=[{"type": {"name": "Duplicate"},
                                    "outwardIssue": {"key": "MC-2"}}])
    report = map_issue_payload(payload)
    assert report.resolution == "Fixed"
    assert report.affected_versions == ("1.21.4",)
    assert report.priority == "Low"
    assert report.comments[0].author == "who"
    assert report.issue_links[0].target_key == "MC-2"


def test_map_payload_missing_summary_names_field():
    payload = _payload()
    del payload["fields"]["summary"]
    with pytest.raises(SchemaError, match="summary"):
        map_issue_payload(payload)


def test_fixture_fetch_small_directory(tmp_path):
    for i in range(3):
        (tmp_path / f"X-{i}.json").write_text(json.dumps(_payload(key=f"X-{i}")))
    reports = fetch_reports(FetchQuery(project_key="X", max_results=10),
                            FixtureTracker(tmp_path))
    assert [r.key for r in reports] == ["X-0", "X-1", "X-2"]

    truncated = fetch_reports(FetchQuery(project_key="X", max_results=2),
                              FixtureTracker(tmp_path))
    assert [r.key for r in truncated] == ["X-0", "X-1"]


def test_fetch_dedupes_and_persists(tmp_path):
    for name, key in (("a.json", "X-1"), ("b.json", "X-1"), ("c.json", "X-2")):
        (tmp_path / name).write_text(json.dumps(_payload(key=key)))
    corpus = tmp_path / "corpus.jsonl"
    reports = fetch_reports(FetchQuery(project_key="X", max_results=10),
                            FixtureTracker(tmp_path), corpus_path=corpus)
    assert [r.key for r in reports] == ["X-1", "X-2"]
    assert len(corpus.read_text().strip().splitlines()) == 2


def test_shipped_fixture_corpus_loads(fixture_corpus):
    assert len(fixture_corpus) >= 30
    assert len({r.key for r in fixture_corpus}) == len(fixture_corpus)


def test_apportion_reproduces_table1():
    counts = apportion_counts(TABLE1_POPULATION, 996)
    assert counts == TABLE1_COUNTS
    assert sum(counts.values()) == 996


def test_apportion_two_equal_strata():
    # largest-remainder oracle computed by hand: quotas are exactly 5 and 5
    assert apportion_counts({"a": 10, "b": 10}, 10) == {"a": 5, "b": 5}


def test_apportion_single_stratum_full_census():
    assert apportion_counts({"only": 7}, 7) == {"only": 7}


def test_apportion_stays_within_quota_fuzz():
    rng = random.Random(11)
    for _ in range(200):
        strata = {f"s{i}": rng.randint(1, 5000) for i in range(rng.randint(2, 9))}
        population = sum(strata.values())
        total = rng.randint(1, population)
        counts = apportion_counts(strata, total)
        assert sum(counts.values()) == total
        for name, pop in strata.items():
            share_diff = abs(counts[name] / total - pop / population)
            assert share_diff < 1 / total + 1 / total + 1e-12
            # every stratum stays within one of its exact quota
            assert abs(counts[name] - pop * total / population) < 1.0 + 1e-9


def _make_population(strata_counts):
    reports = []
    i = 0
    for name, count in strata_counts.items():
        for _ in range(count):
            resolution = None if name == "Null (Open)" else name
            reports.append(RawBugReport(
                key=f"P-{i:05d}", summary="s", description="",
                created=parse_timestamp("2025-03-01T00:00:00Z"),
                updated=parse_timestamp("2025-03-02T00:00:00Z"),
                status="Open", resolution=resolution))
            i += 1
    return reports


def test_stratified_sample_table1_counts_and_target_filter():
    population = _make_population(TABLE1_POPULATION)
    sample, specs = stratified_sample(population, 996, seed=42)
    assert len(sample) == 996
    by_name = {s.resolution_name: s for s in specs}
    for name, expected in TABLE1_COUNTS.items():
        assert by_name[name].sample_count == expected
        assert by_name[name].population_count == TABLE1_POPULATION[name]
    # the 139 target-resolution reports fall straight out of the stratum counts
    targeted = filter_target_resolutions(sample)
    assert len(targeted) == 139
    by_res = {}
    for r in targeted:
        by_res[r.resolution] = by_res.get(r.resolution, 0) + 1
    assert by_res == {"Awaiting Response": 105, "Cannot Reproduce": 18,
                      "Incomplete": 16}


def test_stratified_sample_deterministic_and_seed_sensitive():
    population = _make_population({"Fixed": 50, "Invalid": 30})
    s1, _ = stratified_sample(population, 20, seed=7)
    s2, _ = stratified_sample(population, 20, seed=7)
    s3, _ = stratified_sample(population, 20, seed=8)
    assert [r.key for r in s1] == [r.key for r in s2]
    assert [r.key for r in s1] != [r.key for r in s3]


def test_stratified_sample_full_population():
    population = _make_population({"Fixed": 5})
    sample, specs = stratified_sample(population, 5, seed=1)
    assert {r.key for r in sample} == {r.key for r in population}
    assert specs[0].sample_count == 5


def test_stratified_sample_empty_population():
    with pytest.raises(EmptyPopulation):
        stratified_sample([], 1, seed=0)


def test_margin_of_error_survey_scale_value():
    assert margin_of_error(24998, 996, 0.5, 1.96) == pytest.approx(0.0304, abs=0.0005)


def test_margin_of_error_full_census_is_zero():
    assert margin_of_error(1000, 1000, 0.5, 1.96) == 0.0


def test_margin_of_error_independent_formula():
    # oracle: the closed form re-evaluated in place with different grouping
    n_pop, n_samp, p, z = 10000, 400, 0.5, 1.96
    expected = z * math.sqrt((p - p * p) / n_samp) * math.sqrt(
        (n_pop - n_samp) / (n_pop - 1))
    assert margin_of_error(n_pop, n_samp, p, z) == pytest.approx(expected, rel=1e-12)


def test_filter_target_resolutions_cases():
    population = _make_population({"Fixed": 2, "Awaiting Response": 1,
                                   "Cannot Reproduce": 1, "Invalid": 1})
    assert filter_target_resolutions(population[:2]) == []
    matched = filter_target_resolutions(population)
    assert [r.resolution for r in matched] == ["Awaiting Response", "Cannot Reproduce"]


def test_null_resolution_maps_to_open_stratum():
    report = _make_population({"Null (Open)": 1})[0]
    assert report.resolution is None
    assert resolution_stratum(report) == "Null (Open)"


class _FakeResponse:
    def __init__(self, payload, status_code=200):
        self._payload = payload
        self.status_code = status_code

    def json(self):
        return self._payload


def test_live_tracker_pagination_union_equals_single_shot(monkeypatch):
    # two pages of 2 then exhaustion; the wire path builds JQL and pages startAt
    from brqual import ingest as ingest_mod

    issues = [_payload(key=f"MC-{i}") for i in range(4)]
    seen_params = []

    def fake_get(url, params=None, timeout=None):
        assert url.endswith("/rest/api/2/search")
        seen_params.append(dict(params))
        start = params["startAt"]
        page = issues[start:start + params["maxResults"]]
        return _FakeResponse({"issues": page, "total": len(issues)})

    import requests as requests_mod
    monkeypatch.setattr(requests_mod, "get", fake_get)

    tracker = ingest_mod.LiveTracker("https://tracker.example")
    query = FetchQuery(project_key="MC", max_results=10, page_size=2,
                       created_after="2025-02-01T00:00:00Z",
                       resolution_filter=("Incomplete",))
    paged = fetch_reports(query, tracker)
    single = fetch_reports(FetchQuery(project_key="MC", max_results=10,
                                      page_size=100), tracker)
    # resolution filter drops everything (fixtures are unresolved)
    assert paged == []
    assert [r.key for r in single] == [f"MC-{i}" for i in range(4)]
    jql = seen_params[0]["jql"]
    assert 'project = MC' in jql and 'created >= "2025-02-01T00:00:00Z"' in jql
    assert 'resolution in ("Incomplete")' in jql
    assert [p["startAt"] for p in seen_params[:2]] == [0, 2]


def test_live_tracker_auth_error(monkeypatch):
    import requests as requests_mod

    monkeypatch.setattr(requests_mod, "get",
                        lambda *a, **k: _FakeResponse({}, status_code=401))
    from brqual.errors import AuthError
    from brqual.ingest import LiveTracker

    with pytest.raises(AuthError):
        list(LiveTracker("https://tracker.example").search(
            FetchQuery(project_key="MC", max_results=5)))


def test_stratified_sample_rejects_oversized_request():
    population = _make_population({"Fixed": 5})
    with pytest.raises(ValueError):
        stratified_sample(population, 6, seed=0)
