"""End-to-end investigative run over a case's hives, memory images and raw images.

Steps, in order:

1. memory triage of every ``memory`` source;
2. shellactivities extraction and attribution for every ``hive`` source;
3. the Audio PolicyConfig check on the same hives;
4. keyword, Tor path, obfs4 endpoint, URL and record scans of every ``raw`` source;
5. a note when a hive has no CloudStore key at all.

A source that cannot be read or parsed is listed in ``skipped_steps``; the run
carries on with the rest. Findings about the same subject from different
sources are merged and marked corroborated.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .carver import (
    DEFAULT_MAX_RECORD_LEN,
    CarvedRecord,
    PathHit,
    carve_shellactivity_records,
    find_obfs4_endpoints,
    find_tor_paths,
    find_urls,
    keyword_scan,
    open_stream,
)
from .hive import HiveError, HiveFile, KeyNotFound, open_hive
from .memscan import MemoryVerdict, scan_memory_image
from .report import (
    CATEGORY_ORDER,
    Category,
    Confidence,
    Evidence,
    Finding,
    ForensicReport,
    InputSource,
    SkippedStep,
    sha256_hex,
)
from .shellact import (
    DEFAULT_TITLE_SUFFIXES,
    BrowserKind,
    ShellActivityError,
    ShellActivityRecord,
    classify_record,
    parse_record,
    parse_shellactivities,
    strip_browser_suffix,
)
from .sigdb import URL_PREFIXES, SignatureDb

ROLES = ("hive", "memory", "raw")
_SHELLACT_FRAGMENT = "shellactivities"
_MAX_LISTED = 10


class InvalidCase(ValueError):
    pass


@dataclass
class CaseSource:
    source_id: str
    role: str
    path: Path | None = None
    data: bytes | None = None

    def read(self):
        if self.data is not None:
            return self.data
        return open_stream(self.path)


@dataclass
class CaseInputs:
    case_id: str
    sources: list[CaseSource]
    report_time: str | None = None
    locale_words: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> CaseInputs:
        if not isinstance(data, dict):
            raise InvalidCase("case file must hold a JSON object")
        try:
            raw_sources = data["sources"]
        except KeyError as exc:
            raise InvalidCase("case file has no 'sources'") from exc
        sources = []
        seen = set()
        for s in raw_sources:
            sid, role, path = s.get("id"), s.get("role"), s.get("path")
            if not sid or role not in ROLES or not path:
                raise InvalidCase(f"bad source entry {s!r}: need id, role in {ROLES} and path")
            if sid in seen:
                raise InvalidCase(f"duplicate source id {sid!r}")
            seen.add(sid)
            p = Path(path)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            sources.append(CaseSource(sid, role, p))
        words = data.get("locale_words", [])
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise InvalidCase("locale_words must be a list of strings")
        return cls(str(data.get("case_id", "case")), sources, data.get("report_time"), list(words))

    @classmethod
    def load(cls, path: str | Path) -> CaseInputs:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidCase(f"{path}: {exc}") from exc
        return cls.from_dict(data, path.parent)


class _Collector:
    """Merges findings by (category, subject) across sources."""

    def __init__(self) -> None:
        self._items: dict[tuple[Category, str], dict] = {}

    def add(
        self,
        category: Category,
        subject: str,
        evidence: Evidence,
        timestamps: tuple[str, ...] = (),
        details: dict | None = None,
    ) -> None:
        key = (category, subject.casefold())
        item = self._items.setdefault(
            key, {"subject": subject, "evidence": {}, "timestamps": set(), "details": {}}
        )
        item["evidence"].setdefault(evidence.sort_key(), evidence)
        item["timestamps"].update(timestamps)
        for k, v in (details or {}).items():
            if isinstance(v, list):
                merged = item["details"].setdefault(k, [])
                merged.extend(x for x in v if x not in merged)
                merged.sort()
            else:
                item["details"].setdefault(k, v)

    def findings(self) -> list[Finding]:
        out = []
        for (category, _), item in self._items.items():
            evidence = sorted(item["evidence"].values(), key=Evidence.sort_key)
            sources = {e.source_id for e in evidence}
            confidence = Confidence.CORROBORATED if len(sources) >= 2 else Confidence.SINGLE_SOURCE
            details = dict(item["details"])
            details["sources"] = sorted(sources)
            out.append(
                Finding(category, item["subject"], confidence, evidence, sorted(item["timestamps"]), details)
            )
        out.sort(key=lambda f: (CATEGORY_ORDER[f.category], f.evidence[0].source_id, f.evidence[0].offset, f.subject))
        return out


def _locale_markers(title: str, words: list[str]) -> list[str]:
    return sorted(
        w for w in words if w and re.search(rf"(?<!\w){re.escape(w)}(?!\w)", title, re.IGNORECASE)
    )


def _attribution_details(attr) -> dict:
    details = {"attribution": attr.kind.value}
    if attr.username:
        details["username"] = attr.username
    if attr.drive_letter:
        details["drive"] = attr.drive_letter
    if attr.install_dir:
        details["install_dir"] = attr.install_dir
    return details


class _Run:
    def __init__(
        self,
        inputs: CaseInputs,
        db: SignatureDb,
        chunk_size: int | None,
        max_record_len: int,
        workers: int,
    ):
        self.inputs = inputs
        self.db = db
        self.chunk_size = chunk_size
        self.max_record_len = max_record_len
        self.workers = workers
        self.collector = _Collector()
        self.skipped: list[SkippedStep] = []
        self.recorded_inputs: list[InputSource] = []

    def skip(self, step: str, reason: str) -> None:
        self.skipped.append(SkippedStep(step, reason))

    def _load(self, src: CaseSource):
        try:
            data = src.read()
        except OSError as exc:
            self.skip(f"{src.role}:{src.source_id}", f"input unreadable: {exc}")
            return None
        self.recorded_inputs.append(InputSource(src.source_id, src.role, sha256_hex(data), len(data)))
        return data

    # -- evidence producers ------------------------------------------------------------

    def _add_path_hit(self, sid: str, hit: PathHit, data) -> None:
        raw = data[hit.offset : hit.offset + hit.length]
        ev = Evidence.of(sid, hit.offset, raw, hit.path, hit.encoding)
        attr = hit.attribution
        details = _attribution_details(attr)
        details["paths"] = [hit.path]
        subject = attr.install_dir or hit.path
        self.collector.add(Category.TOR_PRESENCE, subject, ev, details=details)
        if attr.kind is BrowserKind.TOR_PORTABLE:
            self.collector.add(Category.TOR_PORTABLE_MODE, subject, ev, details=details)

    def _add_record(
        self,
        ev: Evidence,
        record: ShellActivityRecord,
        timestamps: tuple[str, ...] = (),
    ) -> None:
        attr = classify_record(record)
        if attr.kind is BrowserKind.UNKNOWN:
            return
        suffixes = self.db.title_suffixes if attr.is_tor else DEFAULT_TITLE_SUFFIXES
        clean, suffix = strip_browser_suffix(record.page_title, suffixes)
        details = _attribution_details(attr)
        details["exe_path"] = record.exe_path
        details["titles"] = [record.page_title]
        if suffix:
            details["title_suffix"] = suffix
        markers = _locale_markers(clean, self.inputs.locale_words)
        if markers:
            details["locale_markers"] = markers
        if attr.is_tor:
            self.collector.add(Category.BROWSING_ACTIVITY, clean, ev, timestamps, details)
            presence = {k: v for k, v in details.items() if k in ("attribution", "username", "drive", "install_dir")}
            presence["paths"] = [record.exe_path]
            self.collector.add(Category.TOR_PRESENCE, attr.install_dir, ev, timestamps, presence)
            if attr.kind is BrowserKind.TOR_PORTABLE:
                self.collector.add(Category.TOR_PORTABLE_MODE, attr.install_dir, ev, timestamps, presence)
        else:
            self.collector.add(Category.FIREFOX_PRIVATE_ACTIVITY, clean, ev, timestamps, details)

    # -- step 1 --------------------------------------------------------------------------

    def memory(self, src: CaseSource) -> None:
        data = self._load(src)
        if data is None:
            return
        sid = src.source_id
        found = scan_memory_image(data, self.db, chunk_size=self.chunk_size, workers=self.workers)
        for hit in found.tor_path_hits:
            self._add_path_hit(sid, hit, data)

        def process_evidence(names: list[str]) -> list[Evidence]:
            evs = []
            for name in names:
                offs = found.process_name_hits.get(name, [])
                for off, enc in zip(offs, found.process_name_encodings.get(name, [])):
                    n = len(name.encode("utf-16-le" if enc == "utf16le" else "utf-8"))
                    raw = data[off : off + n]
                    text = raw.decode("utf-16-le" if enc == "utf16le" else "utf-8")
                    evs.append(Evidence.of(sid, off, raw, text, enc))
            return evs

        counts = {n: len(o) for n, o in found.process_name_hits.items() if o}
        names = {n.casefold(): n for n in found.process_name_hits}
        tor, bridge = names.get("tor.exe"), names.get("obfs4proxy.exe")
        if tor and bridge and counts.get(tor) and counts.get(bridge):
            for ev in process_evidence([tor, bridge]):
                self.collector.add(
                    Category.TOR_PRESENCE,
                    "Tor process indicators (tor.exe, obfs4proxy.exe)",
                    ev,
                    details={"indicator_counts": [f"{n}={c}" for n, c in sorted(counts.items())],
                             "note": "indicator present; not proof of a running process"},
                )
        if found.verdict is MemoryVerdict.FIREFOX_ONLY:
            firefox = names.get("firefox.exe")
            for ev in process_evidence([firefox]):
                self.collector.add(
                    Category.ENVIRONMENT_NOTE,
                    "firefox.exe present in memory without a Tor install path",
                    ev,
                    details={"note": "cannot tell Tor's firefox.exe from a regular Firefox"},
                )

    # -- steps 2, 3, 5 ---------------------------------------------------------------

    def hive(self, src: CaseSource) -> None:
        data = self._load(src)
        if data is None:
            return
        sid = src.source_id
        try:
            hive = open_hive(bytes(data))
        except HiveError as exc:
            self.skip(f"hive:{sid}", f"{type(exc).__name__}: {exc}")
            return

        walk_errors: list[tuple[str, str]] = []
        keys = self._shellactivities_keys(hive, walk_errors)
        if not keys:
            if not hive.find_keys_matching("CloudStore", walk_errors):
                raw = bytes(data)
                ev = Evidence(sid, 0, len(raw), sha256_hex(raw), "no CloudStore key in hive", "none", b"", key_path="")
                self.collector.add(
                    Category.ENVIRONMENT_NOTE,
                    f"CloudStore key absent from {sid}",
                    ev,
                    details={
                        "note": "older Windows builds do not keep shellactivities; their absence proves nothing"
                    },
                )
            else:
                self.skip(f"shellactivities:{sid}", "shellactivities key not found")
        for key in keys:
            for value in hive.list_values(key):
                try:
                    blob = hive.read_value_data(value)
                    log = parse_shellactivities(blob)
                except (HiveError, ShellActivityError) as exc:
                    self.skip(f"shellactivities:{sid}", f"{key.path}\\{value.name}: {type(exc).__name__}: {exc}")
                    continue
                for warning in log.warnings:
                    self.skip(f"shellactivities:{sid}", f"{key.path}\\{value.name}: {warning}")
                stamps = (log.header_timestamp.isoformat(), key.last_written.isoformat())
                for rec in log.records:
                    start, end = rec.raw_extent
                    ev = Evidence.of(
                        sid, start, blob[start:end], rec.page_title, "record",
                        key_path=key.path, value_name=value.name,
                    )
                    self._add_record(ev, rec, stamps)

        for finding_args in check_audio_key(hive, self.db, sid, collect=True):
            self.collector.add(*finding_args)
        for path, reason in walk_errors:
            self.skip(f"hive-walk:{sid}", f"{path or '<root>'}: {reason}")

    def _shellactivities_keys(self, hive: HiveFile, errors: list) -> list:
        try:
            key = hive.get_key(self.db.shellactivities_path)
            return [key] if key.value_count else []
        except KeyNotFound:
            pass
        except HiveError as exc:
            errors.append((self.db.shellactivities_path, str(exc)))
        found = []
        for path in hive.find_keys_matching(_SHELLACT_FRAGMENT, errors):
            try:
                key = hive.get_key(path)
                candidates = [key] + hive.list_subkeys(key)
            except HiveError as exc:
                errors.append((path, str(exc)))
                continue
            found.extend(k for k in candidates if k.value_count and k.cell_offset not in {f.cell_offset for f in found})
        return found

    # -- step 4 ---------------------------------------------------------------------------

    def raw(self, src: CaseSource) -> None:
        data = self._load(src)
        if data is None:
            return
        sid = src.source_id
        opts = {"chunk_size": self.chunk_size, "workers": self.workers}

        for hit in keyword_scan(data, self.db.keywords, context=0, **opts):
            raw = data[hit.offset : hit.offset + hit.length]
            ev = Evidence.of(sid, hit.offset, raw, hit.text, hit.encoding)
            self.collector.add(Category.TOR_PRESENCE, f"keyword: {hit.keyword}", ev)
        for hit in find_tor_paths(data, self.db.path_patterns, **opts):
            self._add_path_hit(sid, hit, data)
        for hit in find_obfs4_endpoints(data, **opts):
            raw = data[hit.offset : hit.offset + hit.length]
            ev = Evidence.of(sid, hit.offset, raw, hit.text, hit.encoding)
            subject = hit.address + (f":{hit.port}" if hit.port else "")
            details = {"address": hit.address, "anchor_offsets": [hit.anchor_offset], "distances": [hit.distance]}
            if hit.port:
                details["port"] = hit.port
            self.collector.add(Category.BRIDGING_ENDPOINT, subject, ev, details=details)
        for hit in find_urls(data, URL_PREFIXES, **opts):
            raw = data[hit.offset : hit.offset + hit.length]
            ev = Evidence.of(sid, hit.offset, raw, hit.url, hit.encoding)
            self.collector.add(Category.BROWSING_ACTIVITY, hit.url, ev, details={"kind": "url"})
        incomplete = []
        for carved in carve_shellactivity_records(data, self.max_record_len, **opts):
            if carved.complete:
                self._add_carved(sid, carved)
            else:
                incomplete.append(carved.source_offset)
        if incomplete:
            shown = ", ".join(map(str, incomplete[:_MAX_LISTED]))
            more = f" and {len(incomplete) - _MAX_LISTED} more" if len(incomplete) > _MAX_LISTED else ""
            self.skip(f"carve:{sid}", f"{len(incomplete)} incomplete record(s) at offset(s) {shown}{more}")

    def _add_carved(self, sid: str, carved: CarvedRecord) -> None:
        rec = carved.record
        ev = Evidence.of(sid, carved.source_offset, carved.raw, rec.page_title, "record")
        self._add_record(ev, rec)


def check_audio_key(hive: HiveFile, db: SignatureDb | None = None, source_id: str = "hive", *, collect: bool = False):
    """Look for the Tor install segment in values under Audio\\PolicyConfig\\PropertyStore.

    Values of the key and of its subkeys are scanned in both encodings. A
    missing key is normal and yields nothing. Returns findings, or, with
    ``collect=True``, the arguments for merging them into a running report.
    """
    db = db or SignatureDb()
    roots = []
    try:
        roots.append(hive.get_key(db.audio_key_path))
    except KeyNotFound:
        # The key is also seen written as "InternetExplorer"; fall back to a search.
        for path in hive.find_keys_matching("PropertyStore"):
            if "policyconfig" in path.casefold():
                roots.append(hive.get_key(path))
    except HiveError:
        return []

    results = []
    for root in roots:
        prefix = root.path.casefold()
        for key in hive.walk():
            if key.path.casefold() != prefix and not key.path.casefold().startswith(prefix + "\\"):
                continue
            for value in hive.list_values(key):
                try:
                    data = hive.read_value_data(value)
                except HiveError:
                    continue
                hits = keyword_scan(data, db.path_patterns, context=64)
                if not hits:
                    continue
                hit = hits[0]
                raw = data[hit.offset : hit.offset + hit.length]
                ev = Evidence.of(
                    source_id, hit.offset, raw, hit.text, hit.encoding,
                    key_path=key.path, value_name=value.name,
                )
                details = {
                    "value_name": value.name,
                    "fragment": hit.context.replace("\x00", "").strip(),
                    "key_last_written": key.last_written.isoformat(),
                }
                results.append(
                    (Category.AUDIO_CORROBORATION, f"{key.path}\\{value.name}", ev, (), details)
                )
    if collect:
        return results
    findings = []
    for category, subject, ev, stamps, details in results:
        findings.append(
            Finding(category, subject, Confidence.SINGLE_SOURCE, [ev], list(stamps), {**details, "sources": [source_id]})
        )
    return findings


def run_methodology(
    inputs: CaseInputs,
    db: SignatureDb | None = None,
    *,
    chunk_size: int | None = None,
    max_record_len: int = DEFAULT_MAX_RECORD_LEN,
    workers: int = 1,
) -> ForensicReport:
    db = db or SignatureDb()
    run = _Run(inputs, db, chunk_size, max_record_len, workers)
    by_role = {role: [s for s in inputs.sources if s.role == role] for role in ROLES}

    if not by_role["memory"]:
        run.skip("memory", "no memory source supplied")
    for src in by_role["memory"]:
        run.memory(src)
    for src in by_role["hive"]:
        run.hive(src)
    for src in by_role["raw"]:
        run.raw(src)

    order = {s.source_id: i for i, s in enumerate(inputs.sources)}
    recorded = sorted(run.recorded_inputs, key=lambda i: order[i.source_id])
    return ForensicReport(
        case_id=inputs.case_id,
        inputs=recorded,
        findings=run.collector.findings(),
        skipped_steps=run.skipped,
        tool_version=__version__,
        report_time=inputs.report_time,
    )


# -- re-validation ------------------------------------------------------------------------


def _text_of(raw: bytes, encoding: str) -> str | None:
    if encoding == "utf16le":
        return raw.decode("utf-16-le")
    if encoding in ("ascii", "utf8"):
        return raw.decode("utf-8")
    if encoding == "record":
        return parse_record(raw, 0)[0].page_title
    return None


def revalidate_evidence(evidence: Evidence, source_data: bytes) -> str | None:
    """Re-read ``evidence`` from its source; return None when it checks out, else the problem."""
    try:
        if evidence.key_path is not None and evidence.value_name is not None:
            hive = open_hive(bytes(source_data))
            key = hive.get_key(evidence.key_path)
            blob = hive.read_value_data(hive.get_value(key, evidence.value_name))
        else:
            blob = source_data
        if evidence.encoding == "none":
            raw = bytes(blob)
        else:
            raw = bytes(blob[evidence.offset : evidence.offset + evidence.length])
        if len(raw) != evidence.length:
            return "location runs past the end of the source"
        if sha256_hex(raw) != evidence.sha256:
            return "digest mismatch"
        text = _text_of(raw, evidence.encoding)
        if text is not None and text != evidence.text:
            return f"decoded text differs: {text!r}"
    except (HiveError, ShellActivityError, UnicodeDecodeError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return None


def revalidate_report(report: ForensicReport, sources: dict[str, bytes]) -> list[str]:
    problems = []
    for finding in report.findings:
        for ev in finding.evidence:
            if ev.source_id not in sources:
                problems.append(f"{finding.subject}: source {ev.source_id!r} not available")
                continue
            problem = revalidate_evidence(ev, sources[ev.source_id])
            if problem:
                problems.append(f"{finding.category.value} {finding.subject}: {problem}")
    return problems
