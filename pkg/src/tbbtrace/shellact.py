"""Decoder for the CloudStore ``shellactivities`` value.

Windows 10 (1703 and later) keeps window and tab titles, together with the
launching executable, under::

    Software\\Microsoft\\Windows\\CurrentVersion\\CloudStore\\Store\\Cache\\
        DefaultAccount\\$$windows.data.taskflow.shellactivities\\Current

The REG_BINARY data is laid out as a 0x18-byte header followed by records::

    header  02 00 00 00 | FILETIME (8) | 00 00 00 00 | 8 unknown bytes
    record  D2 14 | type byte | exe path | C6 1F D2 83 10 D2 23 0B
            | exe name | D2 28 | 1 byte | page title | C6 32 | 5 bytes
            | EA F2 E9 01 | C6 3C | 5 bytes | EA F2 E9 01 | CA 50 00 00

Variable-length fields carry no length prefix; they are bounded by the
marker that follows them. All markers are byte sequences in stream order.
"""

from __future__ import annotations

import re
import struct
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

from .filetime import FiletimeTimestamp, OutOfRange, filetime_to_utc

SHELLACTIVITIES_PATH = (
    "Software\\Microsoft\\Windows\\CurrentVersion\\CloudStore\\Store\\Cache\\"
    "DefaultAccount\\$$windows.data.taskflow.shellactivities\\Current"
)

HEADER_MAGIC = b"\x02\x00\x00\x00"
HEADER_SIZE = 0x18
DEFAULT_HEADER_VALUES = bytes.fromhex("43420100CB0A0A14")

RECORD_HEADER = b"\xd2\x14"
MID_MARKER = bytes.fromhex("C61FD28310D2230B")
NAME_END = b"\xd2\x28"
TITLE_END = b"\xc6\x32"
TRAILER_CONST = bytes.fromhex("EAF2E901")
SECOND_TRAILER = b"\xc6\x3c"
FOOTER = bytes.fromhex("CA500000")

# Every byte sequence whose presence inside a string field would break parsing.
DELIMITERS = (RECORD_HEADER, MID_MARKER, NAME_END, TITLE_END, TRAILER_CONST, SECOND_TRAILER, FOOTER)

UTF16LE = "utf16le"
UTF8 = "utf8"
UNDECODED = "undecoded"
_CODECS = {UTF16LE: "utf-16-le", UTF8: "utf-8"}

TOR_SEGMENT = "Tor Browser"
DEFAULT_TITLE_SUFFIXES = (
    " - Tor Browser",
    " - Mozilla Firefox Private Browsing",
    " \u2014 Mozilla Firefox Private Browsing",
    " - Mozilla Firefox",
    " \u2014 Mozilla Firefox",
)

_PATH_START = re.compile(r"^(?:[A-Za-z]:\\|\\\\)")


class ShellActivityError(ValueError):
    """Base class for shellactivities decoding errors."""


class BadHeader(ShellActivityError):
    pass


class TooShort(ShellActivityError):
    pass


class NoRecordHeader(ShellActivityError):
    pass


class DelimiterNotFound(ShellActivityError):
    pass


class DecodeError(ShellActivityError):
    """String bytes are not valid text in any supported encoding."""


class BrowserKind(str, Enum):
    TOR_STANDARD = "TorStandard"
    TOR_PORTABLE = "TorPortable"
    FIREFOX_OTHER = "FirefoxOther"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class BrowserAttribution:
    kind: BrowserKind
    username: str | None = None
    drive_letter: str | None = None
    install_dir: str | None = None

    @property
    def is_tor(self) -> bool:
        return self.kind in (BrowserKind.TOR_STANDARD, BrowserKind.TOR_PORTABLE)


@dataclass(frozen=True)
class ShellActivityRecord:
    exe_path: str
    exe_name: str
    page_title: str
    type_byte: int = 0x39
    mid_marker: bytes = MID_MARKER
    d228_byte: int = 0
    trailer_a5: bytes = bytes(5)
    trailer_b5: bytes = bytes(5)
    string_encoding: str = UTF16LE
    # Per-field encodings for (exe_path, exe_name, page_title); defaults to string_encoding.
    field_encodings: tuple[str, str, str] | None = None
    raw_extent: tuple[int, int] | None = field(default=None, compare=False)
    raw: bytes = field(default=b"", compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.field_encodings is None:
            object.__setattr__(self, "field_encodings", (self.string_encoding,) * 3)

    @property
    def undecoded(self) -> tuple[str, ...]:
        names = ("exe_path", "exe_name", "page_title")
        return tuple(n for n, enc in zip(names, self.field_encodings) if enc == UNDECODED)

    @property
    def type_byte_matches_path_length(self) -> bool:
        """True when the type byte equals the encoded length of exe_path (mod 256).

        Only a hint: the meaning of this byte is not known.
        """
        enc = self.field_encodings[0]
        if enc == UNDECODED:
            return False
        return self.type_byte == len(self.exe_path.encode(_CODECS[enc])) & 0xFF

    @property
    def name_matches_path(self) -> bool:
        return self.exe_path.casefold().endswith(self.exe_name.casefold())


class QuarantinedSpan(NamedTuple):
    start: int
    end: int
    data: bytes
    reason: str


@dataclass
class ShellActivityLog:
    header_magic: bytes
    header_timestamp: FiletimeTimestamp
    header_zeros: bytes
    header_values_raw: bytes
    records: list[ShellActivityRecord] = field(default_factory=list)
    trailing_raw: bytes = b""
    quarantined: list[QuarantinedSpan] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def header_bytes(self) -> bytes:
        return (
            self.header_magic
            + self.header_timestamp.to_bytes()
            + self.header_zeros
            + self.header_values_raw
        )

    def reassemble(self) -> bytes:
        """Rebuild the source blob from the header, record spans and leftovers."""
        pieces = [(r.raw_extent[0], r.raw) for r in self.records]
        pieces += [(q.start, q.data) for q in self.quarantined]
        pieces.sort(key=lambda p: p[0])
        return self.header_bytes() + b"".join(p[1] for p in pieces) + self.trailing_raw


# -- string decoding ---------------------------------------------------------


def _is_clean_text(text: str) -> bool:
    for ch in text:
        if ch in "\ufffe\uffff" or unicodedata.category(ch) in ("Cc", "Cs"):
            return False
    return True


def decode_text(data: bytes, encoding: str) -> str:
    """Strictly decode ``data`` as ``encoding`` (``utf16le`` or ``utf8``)."""
    if encoding == UTF16LE and len(data) % 2:
        raise DecodeError("odd number of bytes for UTF-16LE")
    try:
        text = data.decode(_CODECS[encoding])
    except UnicodeDecodeError as exc:
        raise DecodeError(str(exc)) from exc
    if not _is_clean_text(text):
        raise DecodeError(f"control or surrogate characters in {encoding} text")
    return text


def encode_text(text: str, encoding: str) -> bytes:
    return text.encode(_CODECS[encoding])


def _decode_fields(spans: tuple[bytes, bytes, bytes]) -> tuple[tuple[str, str, str], tuple[str, str, str], str]:
    """Pick an encoding for a record's three string spans.

    UTF-16LE is tried first. A record where both encodings decode cleanly is
    settled by the executable path: it must start like an absolute Windows
    path in the chosen encoding.
    """
    candidates = {}
    for enc in (UTF16LE, UTF8):
        try:
            candidates[enc] = tuple(decode_text(s, enc) for s in spans)
        except DecodeError:
            continue
    if len(candidates) == 2:
        anchored = [enc for enc, texts in candidates.items() if _PATH_START.match(texts[0])]
        chosen = anchored[0] if len(anchored) == 1 else UTF16LE
        return candidates[chosen], (chosen,) * 3, chosen
    if candidates:
        (chosen, texts), = candidates.items()
        return texts, (chosen,) * 3, chosen

    # No single encoding fits every field: decode each on its own.
    texts, encs = [], []
    for span in spans:
        for enc in (UTF16LE, UTF8):
            try:
                texts.append(decode_text(span, enc))
                encs.append(enc)
                break
            except DecodeError:
                continue
        else:
            texts.append(span.decode("utf-8", errors="backslashreplace"))
            encs.append(UNDECODED)
    record_enc = encs[0] if encs[0] != UNDECODED else next((e for e in encs if e != UNDECODED), UNDECODED)
    return tuple(texts), tuple(encs), record_enc


# -- parsing -------------------------------------------------------------------


def _find(blob: bytes, marker: bytes, start: int, end: int, what: str) -> int:
    pos = blob.find(marker, start, end)
    if pos < 0:
        raise DelimiterNotFound(f"{what} ({marker.hex()}) not found after offset {start}")
    return pos


def _expect(blob: bytes, marker: bytes, pos: int, end: int, what: str) -> int:
    if pos + len(marker) > end or blob[pos : pos + len(marker)] != marker:
        raise DelimiterNotFound(f"{what} ({marker.hex()}) expected at offset {pos}")
    return pos + len(marker)


def parse_record(blob: bytes, offset: int, end: int | None = None) -> tuple[ShellActivityRecord, int]:
    """Parse one record starting at ``offset``; return it and the offset past its footer.

    ``end`` bounds every delimiter search (defaults to the end of ``blob``).
    """
    end = len(blob) if end is None else min(end, len(blob))
    if blob[offset : offset + 2] != RECORD_HEADER:
        raise NoRecordHeader(f"no record header at offset {offset}")
    if offset + 3 > end:
        raise DelimiterNotFound(f"record at offset {offset} is cut short")
    type_byte = blob[offset + 2]

    path_start = offset + 3
    mid = _find(blob, MID_MARKER, path_start, end, "executable marker")
    name_start = mid + len(MID_MARKER)
    name_end = _find(blob, NAME_END, name_start, end, "name terminator")
    if name_end + 3 > end:
        raise DelimiterNotFound(f"record at offset {offset} is cut short after the name")
    d228_byte = blob[name_end + 2]
    title_start = name_end + 3
    title_end = _find(blob, TITLE_END, title_start, end, "title terminator")

    pos = title_end + len(TITLE_END)
    if pos + 5 > end:
        raise DelimiterNotFound(f"record at offset {offset} is cut short in the trailer")
    trailer_a5 = blob[pos : pos + 5]
    pos = _expect(blob, TRAILER_CONST, pos + 5, end, "trailer constant")
    pos = _expect(blob, SECOND_TRAILER, pos, end, "second trailer marker")
    if pos + 5 > end:
        raise DelimiterNotFound(f"record at offset {offset} is cut short in the trailer")
    trailer_b5 = blob[pos : pos + 5]
    pos = _expect(blob, TRAILER_CONST, pos + 5, end, "trailer constant")
    pos = _expect(blob, FOOTER, pos, end, "record footer")

    texts, encodings, record_enc = _decode_fields(
        (blob[path_start:mid], blob[name_start:name_end], blob[title_start:title_end])
    )
    record = ShellActivityRecord(
        exe_path=texts[0],
        exe_name=texts[1],
        page_title=texts[2],
        type_byte=type_byte,
        mid_marker=bytes(blob[mid:name_start]),
        d228_byte=d228_byte,
        trailer_a5=bytes(trailer_a5),
        trailer_b5=bytes(trailer_b5),
        string_encoding=record_enc,
        field_encodings=encodings,
        raw_extent=(offset, pos),
        raw=bytes(blob[offset:pos]),
    )
    return record, pos


def parse_header(blob: bytes) -> ShellActivityLog:
    if len(blob) < HEADER_SIZE:
        raise TooShort(f"blob is {len(blob)} bytes, header needs {HEADER_SIZE}")
    if blob[:4] != HEADER_MAGIC:
        raise BadHeader(f"header magic {bytes(blob[:4]).hex()} is not 02000000")
    return ShellActivityLog(
        header_magic=bytes(blob[:4]),
        header_timestamp=FiletimeTimestamp.from_bytes(blob, 4),
        header_zeros=bytes(blob[12:16]),
        header_values_raw=bytes(blob[16:24]),
    )


def parse_shellactivities(blob: bytes) -> ShellActivityLog:
    """Decode a whole shellactivities value.

    Records are read greedily from offset 0x18. Bytes that do not form a
    record are kept, never dropped: spans between records go to
    ``quarantined`` and the unconsumed tail to ``trailing_raw``.
    """
    blob = bytes(blob)
    log = parse_header(blob)
    if log.header_zeros != bytes(4):
        log.warnings.append(f"header bytes 12-15 are {log.header_zeros.hex()}, expected zeros")
    cursor = HEADER_SIZE
    while True:
        start = blob.find(RECORD_HEADER, cursor)
        if start < 0:
            break
        try:
            record, nxt = parse_record(blob, start)
        except DelimiterNotFound as exc:
            resume = blob.find(RECORD_HEADER, start + 2)
            if resume < 0:
                log.warnings.append(f"record at offset {start} kept in trailing bytes: {exc}")
                break
            reason = f"record at offset {start} does not parse: {exc}"
            log.quarantined.append(QuarantinedSpan(cursor, resume, blob[cursor:resume], reason))
            log.warnings.append(reason)
            cursor = resume
            continue
        if start > cursor:
            reason = f"unrecognised bytes at offsets {cursor}-{start}"
            log.quarantined.append(QuarantinedSpan(cursor, start, blob[cursor:start], reason))
            log.warnings.append(reason)
        log.records.append(record)
        cursor = nxt
    log.trailing_raw = blob[cursor:]
    return log


def trailer_timestamp_hint(trailer: bytes) -> dict:
    """Check whether bytes 1-4 of a 5-byte trailer plus the EAF2E901 constant read as a FILETIME.

    This only reports a candidate; the trailer's meaning is not established.
    """
    if len(trailer) != 5:
        return {"candidate": None, "plausible": False}
    raw = struct.unpack("<Q", trailer[1:] + TRAILER_CONST)[0]
    try:
        instant = filetime_to_utc(raw)
    except OutOfRange:
        return {"candidate": None, "plausible": False}
    year = instant.when.year
    return {"candidate": instant.isoformat(), "plausible": 2015 <= year <= 2035}


# -- attribution ---------------------------------------------------------------


def classify_path(path: str, tor_segments: tuple[str, ...] = (TOR_SEGMENT,)) -> BrowserAttribution:
    segments = [s for s in path.replace("/", "\\").split("\\")]
    folded = [s.casefold() for s in segments]
    drive = segments[0][0].upper() if re.fullmatch(r"[A-Za-z]:", segments[0] or "") else None
    wanted = {s.casefold() for s in tor_segments}
    tor_index = next((i for i, s in enumerate(folded[:-1]) if s in wanted), None)
    if tor_index is None and folded and folded[-1] in wanted:
        tor_index = len(folded) - 1

    if tor_index is not None:
        install_dir = "\\".join(segments[: tor_index + 1])
        users = next((i for i, s in enumerate(folded[:tor_index]) if s == "users"), None)
        if users is not None and users + 1 < tor_index:
            return BrowserAttribution(BrowserKind.TOR_STANDARD, segments[users + 1], drive, install_dir)
        return BrowserAttribution(BrowserKind.TOR_PORTABLE, None, drive, install_dir)
    if folded and folded[-1] == "firefox.exe":
        return BrowserAttribution(BrowserKind.FIREFOX_OTHER, None, drive, None)
    return BrowserAttribution(BrowserKind.UNKNOWN, None, drive, None)


def classify_record(rec: ShellActivityRecord) -> BrowserAttribution:
    """Attribute a record to Tor (standard or portable), another Firefox, or nothing known."""
    return classify_path(rec.exe_path)


def strip_browser_suffix(
    title: str, suffixes: tuple[str, ...] | list[str] = DEFAULT_TITLE_SUFFIXES
) -> tuple[str, str | None]:
    for suffix in sorted(suffixes, key=len, reverse=True):
        if suffix and title.endswith(suffix):
            return title[: -len(suffix)], suffix
    return title, None
