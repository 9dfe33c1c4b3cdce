import json

import pytest

from tbbtrace.carver import open_stream
from tbbtrace.hive import REG_BINARY, open_hive
from tbbtrace.pipeline import (
    CaseInputs,
    CaseSource,
    InvalidCase,
    check_audio_key,
    revalidate_evidence,
    revalidate_report,
    run_methodology,
)
from tbbtrace.report import Category, Confidence, Evidence
from tbbtrace.shellact import SHELLACTIVITIES_PATH
from tbbtrace.sigdb import AUDIO_POLICY_PATH, SignatureDb
from tbbtrace.synth import (
    CASE_TITLES,
    PORTABLE_PATH,
    PORTABLE_TITLE,
    build_minimal_hive,
    build_shellactivities_blob,
    encode_record,
    sample_record,
    plant_in_noise,
    scatter_plants,
)


def _subjects(report, category):
    return {f.subject for f in report.by_category(category)}


def _sources(case_dir, inputs):
    return {s.source_id: bytes(open_stream(s.path)) for s in inputs.sources}


@pytest.fixture(scope="module")
def case_report(case_dir):
    inputs = CaseInputs.load(case_dir / "case.json")
    return inputs, run_methodology(inputs)


def test_case_categories(case_report):
    _, report = case_report
    present = {f.category for f in report.findings}
    assert present >= {
        Category.TOR_PRESENCE,
        Category.TOR_PORTABLE_MODE,
        Category.BROWSING_ACTIVITY,
        Category.BRIDGING_ENDPOINT,
        Category.AUDIO_CORROBORATION,
    }
    titles = _subjects(report, Category.BROWSING_ACTIVITY)
    for t in CASE_TITLES + (PORTABLE_TITLE,):
        assert t.removesuffix(" - Tor Browser") in titles
    assert "192.0.2.7:443" in _subjects(report, Category.BRIDGING_ENDPOINT)
    assert "E:\\Tor Browser" in _subjects(report, Category.TOR_PORTABLE_MODE)
    assert report.skipped_steps == []


def test_corroboration(case_report):
    _, report = case_report
    by_subject = {f.subject: f for f in report.by_category(Category.BROWSING_ACTIVITY)}
    soundcloud = by_subject[CASE_TITLES[0].removesuffix(" - Tor Browser")]
    assert soundcloud.confidence is Confidence.CORROBORATED
    assert {e.source_id for e in soundcloud.evidence} == {"ntuser", "unalloc"}
    moog = by_subject[CASE_TITLES[1].removesuffix(" - Tor Browser")]
    assert moog.confidence is Confidence.SINGLE_SOURCE
    assert moog.details["locale_markers"] == ["Suche"]
    assert "2018-04-03T14:09:47Z" in moog.timestamps
    assert moog.details["username"] == "40187070"


def test_every_finding_has_evidence_that_revalidates(case_dir, case_report):
    inputs, report = case_report
    assert all(f.evidence for f in report.findings)
    assert revalidate_report(report, _sources(case_dir, inputs)) == []


def test_tampered_evidence_fails_revalidation(case_dir, case_report):
    inputs, report = case_report
    sources = _sources(case_dir, inputs)
    ev = report.by_category(Category.BRIDGING_ENDPOINT)[0].evidence[0]
    moved = Evidence(ev.source_id, ev.offset + 1, ev.length, ev.sha256, ev.text, ev.encoding)
    assert revalidate_evidence(moved, sources[ev.source_id]) == "digest mismatch"


def test_deterministic(case_dir):
    inputs = CaseInputs.load(case_dir / "case.json")
    a = run_methodology(inputs)
    b = run_methodology(CaseInputs.load(case_dir / "case.json"), chunk_size=100_000, workers=3)
    assert a == b


def test_machine_report_shape(case_report):
    from tbbtrace.report import render_report

    doc = json.loads(render_report(case_report[1], "machine"))
    assert set(doc) >= {"schema_version", "case_id", "tool_version", "inputs", "findings", "skipped_steps"}
    ev = doc["findings"][0]["evidence"][0]
    assert isinstance(ev["offset"], int)
    assert len(ev["sha256"]) == 64 and ev["sha256"] == ev["sha256"].lower()
    bytes.fromhex(ev["raw_hex"])


def test_empty_raw_source():
    inputs = CaseInputs("empty", [CaseSource("r", "raw", data=b"")])
    report = run_methodology(inputs)
    assert report.findings == []
    assert [s.step for s in report.skipped_steps] == ["memory"]


def test_hive_only_skips_memory():
    hive = build_minimal_hive([("Software", [])])
    report = run_methodology(CaseInputs("h", [CaseSource("nt", "hive", data=hive)]))
    assert ("memory", "no memory source supplied") in [(s.step, s.reason) for s in report.skipped_steps]
    assert _subjects(report, Category.ENVIRONMENT_NOTE) == {"CloudStore key absent from nt"}


def test_bad_sources_become_skips(tmp_path):
    inputs = CaseInputs(
        "bad",
        [
            CaseSource("zero", "hive", data=b""),
            CaseSource("gone", "raw", path=tmp_path / "missing.bin"),
            CaseSource("mem", "memory", data=b"firefox.exe"),
        ],
    )
    report = run_methodology(inputs)
    steps = {s.step for s in report.skipped_steps}
    assert {"hive:zero", "raw:gone"} <= steps
    assert _subjects(report, Category.ENVIRONMENT_NOTE)


def test_truncated_blob_is_skipped_not_fatal():
    blob = build_shellactivities_blob(0, [sample_record()])[:-10]
    hive = build_minimal_hive([(SHELLACTIVITIES_PATH, [("Data", REG_BINARY, blob)])])
    report = run_methodology(CaseInputs("t", [CaseSource("nt", "hive", data=hive)]))
    assert any(s.step == "shellactivities:nt" for s in report.skipped_steps)


def test_fallback_key_search():
    blob = build_shellactivities_blob(0, [sample_record()])
    path = "Software\\Elsewhere\\$$windows.data.taskflow.shellactivities\\Current"
    hive = build_minimal_hive([(path, [("Data", REG_BINARY, blob)])])
    report = run_methodology(CaseInputs("f", [CaseSource("nt", "hive", data=hive)]))
    assert len(report.by_category(Category.BROWSING_ACTIVITY)) == 1


def test_firefox_private_activity():
    rec = sample_record("C:\\Program Files\\Mozilla Firefox\\firefox.exe", "News - Mozilla Firefox Private Browsing")
    hive = build_minimal_hive([(SHELLACTIVITIES_PATH, [("Data", REG_BINARY, build_shellactivities_blob(0, [rec]))])])
    report = run_methodology(CaseInputs("ff", [CaseSource("nt", "hive", data=hive)]))
    assert _subjects(report, Category.FIREFOX_PRIVATE_ACTIVITY) == {"News"}
    assert report.by_category(Category.BROWSING_ACTIVITY) == []


def test_adding_a_source_keeps_findings(case_dir):
    full = CaseInputs.load(case_dir / "case.json")
    partial = CaseInputs(full.case_id, full.sources[:1], full.report_time, full.locale_words)
    small = {(f.category, f.subject) for f in run_methodology(partial).findings}
    big = {(f.category, f.subject) for f in run_methodology(full).findings}
    assert small <= big


def test_portable_record_from_raw():
    raw = plant_in_noise(scatter_plants(3, 1 << 16, [("record", encode_record(sample_record(PORTABLE_PATH, "x")), "b")]))
    report = run_methodology(CaseInputs("p", [CaseSource("u", "raw", data=raw)]))
    assert _subjects(report, Category.TOR_PORTABLE_MODE) == {"E:\\Tor Browser"}


def test_audio_key(case_dir):
    hive = open_hive((case_dir / "NTUSER.DAT").read_bytes())
    findings = check_audio_key(hive, SignatureDb(), "ntuser")
    assert len(findings) == 1
    assert findings[0].category is Category.AUDIO_CORROBORATION
    assert findings[0].details["value_name"].startswith("{9855c4cd")


def test_audio_key_absent_or_clean():
    assert check_audio_key(open_hive(build_minimal_hive([("Software", [])]))) == []
    clean = build_minimal_hive([(AUDIO_POLICY_PATH + "\\0", [("v", REG_BINARY, "nothing here".encode("utf-16-le"))])])
    assert check_audio_key(open_hive(clean)) == []


def test_audio_key_alternate_spelling():
    path = AUDIO_POLICY_PATH.replace("Internet Explorer", "InternetExplorer")
    data = "\\Tor Browser\\Browser\\firefox.exe".encode("utf-16-le")
    hive = open_hive(build_minimal_hive([(path, [("v", REG_BINARY, data)])]))
    assert len(check_audio_key(hive)) == 1


def test_case_file_validation(tmp_path):
    with pytest.raises(InvalidCase):
        CaseInputs.from_dict({"sources": [{"id": "a", "role": "disk", "path": "x"}]})
    with pytest.raises(InvalidCase):
        CaseInputs.from_dict({"sources": [{"id": "a", "role": "raw", "path": "x"}, {"id": "a", "role": "raw", "path": "y"}]})
    with pytest.raises(InvalidCase):
        CaseInputs.from_dict({})
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(InvalidCase):
        CaseInputs.load(tmp_path / "c.json")
    inputs = CaseInputs.from_dict({"sources": [{"id": "a", "role": "raw", "path": "x.bin"}]}, tmp_path)
    assert inputs.sources[0].path == tmp_path / "x.bin"
