"""Tor indicator triage over memory images (RAM dumps, pagefile.sys, hiberfil.sys).

Images are scanned as flat bytes, container headers included. No kernel
structures are walked, so a name found here means the string is present in
the image, not that a process is running.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .carver import ENCODINGS, PathHit, find_tor_paths, keyword_scan
from .sigdb import SignatureDb

FIREFOX = "firefox.exe"
TOR = "tor.exe"
OBFS4PROXY = "obfs4proxy.exe"


class MemoryVerdict(str, Enum):
    TOR_CONFIRMED = "TorConfirmed"
    FIREFOX_ONLY = "FirefoxOnly"
    NO_INDICATORS = "NoIndicators"


@dataclass
class MemoryFindings:
    process_name_hits: dict[str, list[int]]
    tor_path_hits: list[PathHit]
    verdict: MemoryVerdict
    notes: list[str] = field(default_factory=list)
    # Encoding of each process-name hit, keyed like process_name_hits.
    process_name_encodings: dict[str, list[str]] = field(default_factory=dict)


def _hits_for(hits: Mapping[str, Sequence[int]], name: str) -> bool:
    return any(k.casefold() == name and v for k, v in hits.items())


def memory_verdict(
    process_name_hits: Mapping[str, Sequence[int]], tor_path_hits: Sequence[PathHit]
) -> MemoryVerdict:
    """Tor is confirmed by an install path, or by tor.exe and obfs4proxy.exe together.

    firefox.exe on its own is ambiguous: it could be any Firefox install.
    """
    if tor_path_hits or (
        _hits_for(process_name_hits, TOR) and _hits_for(process_name_hits, OBFS4PROXY)
    ):
        return MemoryVerdict.TOR_CONFIRMED
    if _hits_for(process_name_hits, FIREFOX):
        return MemoryVerdict.FIREFOX_ONLY
    return MemoryVerdict.NO_INDICATORS


def scan_memory_image(
    stream,
    db: SignatureDb | None = None,
    *,
    chunk_size: int | None = None,
    workers: int = 1,
) -> MemoryFindings:
    db = db or SignatureDb()
    names = list(dict.fromkeys(db.process_names))
    by_name: dict[str, list[int]] = {n: [] for n in names}
    encodings: dict[str, list[str]] = {n: [] for n in names}
    for hit in keyword_scan(stream, names, ENCODINGS, context=0, chunk_size=chunk_size, workers=workers):
        by_name[hit.keyword].append(hit.offset)
        encodings[hit.keyword].append(hit.encoding)
    paths = find_tor_paths(stream, db.path_patterns, chunk_size=chunk_size, workers=workers)
    verdict = memory_verdict(by_name, paths)

    notes = [f"{name}: indicator present {len(offs)} time(s)" for name, offs in by_name.items() if offs]
    users = sorted({p.attribution.username for p in paths if p.attribution.username})
    if users:
        notes.append("username(s) from install paths: " + ", ".join(users))
    drives = sorted({p.attribution.drive_letter for p in paths if p.attribution.drive_letter})
    if drives:
        notes.append("drive(s) holding the Tor install: " + ", ".join(drives))
    if verdict is MemoryVerdict.FIREFOX_ONLY:
        notes.append("firefox.exe present without a Tor install path; cannot tell Tor from a regular Firefox")
    return MemoryFindings(by_name, paths, verdict, notes, encodings)
