"""Findings, evidence provenance and report rendering."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

SCHEMA_VERSION = "1.0"


class Category(str, Enum):
    TOR_PRESENCE = "TorPresence"
    TOR_PORTABLE_MODE = "TorPortableMode"
    BROWSING_ACTIVITY = "BrowsingActivity"
    BRIDGING_ENDPOINT = "BridgingEndpoint"
    AUDIO_CORROBORATION = "AudioCorroboration"
    FIREFOX_PRIVATE_ACTIVITY = "FirefoxPrivateActivity"
    ENVIRONMENT_NOTE = "EnvironmentNote"


CATEGORY_ORDER = {c: i for i, c in enumerate(Category)}


class Confidence(str, Enum):
    CORROBORATED = "Corroborated"
    SINGLE_SOURCE = "Single-source"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Evidence:
    """Bytes at a named location in a named source.

    For hive sources ``offset`` is relative to the data of ``value_name``
    under ``key_path``; otherwise it is a byte offset into the source.
    ``encoding`` says how ``text`` is derived from the bytes: ``ascii``,
    ``utf16le``, ``record`` (page title of a shellactivities record) or
    ``none`` (digest only).
    """

    source_id: str
    offset: int
    length: int
    sha256: str
    text: str
    encoding: str
    raw: bytes = field(default=b"", repr=False)
    key_path: str | None = None
    value_name: str | None = None

    @classmethod
    def of(cls, source_id: str, offset: int, raw: bytes, text: str, encoding: str, **kw) -> Evidence:
        raw = bytes(raw)
        return cls(source_id, offset, len(raw), sha256_hex(raw), text, encoding, raw, **kw)

    def sort_key(self) -> tuple:
        return (self.source_id, self.key_path or "", self.value_name or "", self.offset, self.encoding)

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "key_path": self.key_path,
            "value_name": self.value_name,
            "offset": self.offset,
            "length": self.length,
            "sha256": self.sha256,
            "raw_hex": self.raw.hex(),
            "encoding": self.encoding,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Evidence:
        return cls(
            source_id=d["source_id"],
            offset=int(d["offset"]),
            length=int(d["length"]),
            sha256=d["sha256"],
            text=d["text"],
            encoding=d["encoding"],
            raw=bytes.fromhex(d.get("raw_hex", "")),
            key_path=d.get("key_path"),
            value_name=d.get("value_name"),
        )


@dataclass
class Finding:
    category: Category
    subject: str
    confidence: Confidence
    evidence: list[Evidence]
    timestamps: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def sort_key(self) -> tuple:
        first = self.evidence[0].sort_key() if self.evidence else ()
        return (CATEGORY_ORDER[self.category], first, self.subject)

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "subject": self.subject,
            "confidence": self.confidence.value,
            "timestamps": list(self.timestamps),
            "details": self.details,
            "evidence": [e.to_dict() for e in self.evidence],
        }


@dataclass(frozen=True)
class InputSource:
    source_id: str
    role: str  # hive, memory or raw
    sha256: str
    size: int


@dataclass(frozen=True)
class SkippedStep:
    step: str
    reason: str


@dataclass
class ForensicReport:
    case_id: str
    inputs: list[InputSource]
    findings: list[Finding]
    skipped_steps: list[SkippedStep]
    tool_version: str
    report_time: str | None = None

    def by_category(self, category: Category) -> list[Finding]:
        return [f for f in self.findings if f.category is category]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "case_id": self.case_id,
            "tool_version": self.tool_version,
            "report_time": self.report_time,
            "inputs": [
                {"source_id": i.source_id, "role": i.role, "sha256": i.sha256, "size": i.size}
                for i in self.inputs
            ],
            "findings": [f.to_dict() for f in self.findings],
            "skipped_steps": [{"step": s.step, "reason": s.reason} for s in self.skipped_steps],
        }


def render_report(report: ForensicReport, fmt: str = "human") -> bytes:
    if fmt == "machine":
        return (json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt != "human":
        raise ValueError(f"unknown report format {fmt!r}")
    return _render_human(report).encode("utf-8")


def _describe_location(e: Evidence) -> str:
    if e.key_path is not None:
        where = f"key {e.key_path or '<root>'}"
        if e.value_name is not None:
            where += f" value {e.value_name or '(default)'}"
        return f"{where} @ {e.offset}"
    return f"offset {e.offset}"


def _render_human(report: ForensicReport) -> str:
    lines = [
        "Tor Browser artefact report",
        f"Case: {report.case_id}",
        f"Report time: {report.report_time or 'not given'}",
        f"Tool version: {report.tool_version}",
        "",
        "Inputs",
    ]
    for i in report.inputs:
        lines.append(f"  {i.source_id} [{i.role}] {i.size} bytes sha256={i.sha256}")
    if not report.inputs:
        lines.append("  (none)")

    lines += ["", f"Findings ({len(report.findings)})"]
    for category in Category:
        group = report.by_category(category)
        if not group:
            continue
        lines += ["", f"== {category.value} ({len(group)}) =="]
        for f in group:
            lines.append(f"* {f.subject} [{f.confidence.value}]")
            for key in sorted(f.details):
                value = f.details[key]
                if isinstance(value, list):
                    value = ", ".join(map(str, value))
                lines.append(f"    {key}: {value}")
            if f.timestamps:
                lines.append(f"    timestamps: {', '.join(f.timestamps)}")
            for e in f.evidence:
                text = e.text if len(e.text) <= 160 else e.text[:157] + "..."
                lines.append(
                    f"    evidence: {e.source_id} {_describe_location(e)} len {e.length} "
                    f"[{e.encoding}] sha256={e.sha256[:16]}... {text!r}"
                )
    if not report.findings:
        lines.append("  (none)")

    lines += ["", "Skipped steps"]
    for s in report.skipped_steps:
        lines.append(f"  {s.step}: {s.reason}")
    if not report.skipped_steps:
        lines.append("  (none)")
    return "\n".join(lines) + "\n"
