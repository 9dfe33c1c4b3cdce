"""Scanning of flat byte streams: keywords, Tor paths, URLs, obfs4 endpoints and
shellactivities records.

Every scan accepts any bytes-like stream (``bytes``, ``bytearray``,
``memoryview`` or an ``mmap``). With ``chunk_size`` set, the stream is cut into
chunks that overlap by at least the longest span a hit can cover; each hit
belongs to the chunk holding its anchor offset, so the merged output is the
same as a single pass. ``workers > 1`` scans chunks on a thread pool.
"""

from __future__ import annotations

import mmap
import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

from .shellact import (
    RECORD_HEADER,
    BrowserAttribution,
    DelimiterNotFound,
    ShellActivityRecord,
    TOR_SEGMENT,
    classify_path,
    parse_record,
)

ASCII = "ascii"
UTF16LE = "utf16le"
ENCODINGS = (ASCII, UTF16LE)

DEFAULT_KEYWORDS = ("Tor Browser", "obfs4", "firefox.exe", "tor.exe", "obfs4proxy.exe")
DEFAULT_CONTEXT = 128
DEFAULT_MAX_RECORD_LEN = 64 * 1024
DEFAULT_ENDPOINT_WINDOW = 256
MAX_PATH_CHARS = 512
MAX_URL_CHARS = 2048
# Chunk size forced on memory-mapped streams so a scan never copies a whole image.
DEFAULT_CHUNK_SIZE = 64 * 1024 * 1024

_PATH_FORBIDDEN = set('<>"|?*')
_URL_CHARS = frozenset(
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-._~:/?#[]@!$&'()*+,;=%"
)
_IPV4 = re.compile(
    r"(?<![0-9.])(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})(?::(\d{1,5}))?(?![0-9])"
)
_EXE_END = re.compile(r"(?i)\.exe")

T = TypeVar("T")


@dataclass(frozen=True, order=True)
class KeywordHit:
    offset: int
    encoding: str
    keyword: str
    text: str  # on-disk spelling of the match
    length: int  # bytes
    context: str = ""


@dataclass(frozen=True, order=True)
class PathHit:
    offset: int
    encoding: str
    path: str
    length: int
    attribution: BrowserAttribution


@dataclass(frozen=True, order=True)
class UrlHit:
    offset: int
    encoding: str
    url: str
    length: int


@dataclass(frozen=True, order=True)
class EndpointHit:
    offset: int  # offset of the address text
    encoding: str
    address: str
    port: int | None
    anchor_offset: int
    distance: int
    text: str
    length: int


@dataclass(frozen=True)
class CarvedRecord:
    source_offset: int
    complete: bool
    record: ShellActivityRecord | None
    raw: bytes

    @property
    def end_offset(self) -> int:
        return self.source_offset + len(self.raw)


# -- stream plumbing -------------------------------------------------------------


def open_stream(path: str | Path):
    """Map a file read-only. Empty files come back as ``b""`` (mmap rejects them)."""
    with open(path, "rb") as fh:
        try:
            return mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        except ValueError:
            return b""


def _spans(length: int, chunk_size: int | None, overlap: int) -> list[tuple[int, int, int, int]]:
    """Chunk layout as (owned_lo, owned_hi, data_lo, data_hi)."""
    if not chunk_size or chunk_size >= length:
        return [(0, length, 0, length)]
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    out = []
    for lo in range(0, length, chunk_size):
        hi = min(lo + chunk_size, length)
        out.append((lo, hi, max(0, lo - overlap), min(length, hi + overlap)))
    return out


def _run_chunked(
    stream,
    chunk_size: int | None,
    overlap: int,
    workers: int,
    scan: Callable[[bytes, int, int, int, int], list[T]],
) -> list[T]:
    if isinstance(stream, memoryview):
        stream = stream.tobytes()
    length = len(stream)
    if chunk_size is None and isinstance(stream, mmap.mmap):
        chunk_size = DEFAULT_CHUNK_SIZE
    spans = _spans(length, chunk_size, overlap)

    def one(span: tuple[int, int, int, int]) -> list[T]:
        lo, hi, dlo, dhi = span
        data = stream if (dlo == 0 and dhi == length) else stream[dlo:dhi]
        return scan(data, dlo, lo, hi, length)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, spans))
    else:
        parts = [one(s) for s in spans]
    return [hit for part in parts for hit in part]


def _check_overlap(overlap: int | None, required: int) -> int:
    if overlap is None:
        return required
    if overlap < required:
        raise ValueError(f"overlap {overlap} is below the {required} bytes this scan needs")
    return overlap


# -- keyword matching ------------------------------------------------------------


def _encode(keyword: str, encoding: str) -> bytes:
    # Single-byte scans carry non-ASCII keyword characters as UTF-8.
    return keyword.encode("utf-16-le" if encoding == UTF16LE else "utf-8")


def _decode(data: bytes, encoding: str, errors: str = "strict") -> str:
    return bytes(data).decode("utf-16-le" if encoding == UTF16LE else "utf-8", errors=errors)


def keyword_regex(keyword: str, encoding: str) -> re.Pattern[bytes]:
    """Exact pattern for ``keyword``: ASCII letters match either case, all else byte-exact."""
    parts = []
    for ch in keyword:
        if ch.isascii() and ch.isalpha():
            pair = re.escape((ch.lower() + ch.upper()).encode())
            parts.append(b"[" + pair + b"]" + (b"\x00" if encoding == UTF16LE else b""))
        else:
            parts.append(re.escape(_encode(ch, encoding)))
    return re.compile(b"".join(parts))


class _Matcher:
    """Finds every (possibly overlapping) occurrence of one keyword in one encoding.

    The search runs over an ASCII-lowered copy of the buffer with a plain
    substring search; each candidate is confirmed against the exact pattern.
    """

    def __init__(self, keyword: str, encoding: str):
        self.keyword = keyword
        self.encoding = encoding
        self.needle = _encode(keyword, encoding).lower()
        self.regex = keyword_regex(keyword, encoding)

    def positions(self, data, lowered: bytes, lo: int, hi: int) -> Iterator[int]:
        if not self.needle:
            return
        pos = lo
        while True:
            pos = lowered.find(self.needle, pos, hi + len(self.needle) - 1)
            if pos < 0 or pos >= hi:
                return
            if self.regex.match(data, pos):
                yield pos
            pos += 1


def _matchers(keywords: Iterable[str], encodings: Iterable[str]) -> list[_Matcher]:
    requested = set(encodings)
    unknown = requested - set(ENCODINGS)
    if unknown:
        raise ValueError(f"unknown encodings {sorted(unknown)}")
    encodings = [e for e in ENCODINGS if e in requested]
    return [_Matcher(k, e) for k in dict.fromkeys(keywords) if k for e in encodings]


def _context(data, pos: int, length: int, encoding: str, radius: int) -> str:
    if encoding == UTF16LE:
        radius -= radius % 2
    start = max(0, pos - radius)
    if encoding == UTF16LE and (pos - start) % 2:
        start += 1
    end = min(len(data), pos + length + radius)
    if encoding == UTF16LE and (end - start) % 2:
        end -= 1
    return _decode(data[start:end], encoding, errors="replace")


def keyword_scan(
    stream,
    keywords: Sequence[str] = DEFAULT_KEYWORDS,
    encodings: Iterable[str] = ENCODINGS,
    *,
    context: int = DEFAULT_CONTEXT,
    chunk_size: int | None = None,
    overlap: int | None = None,
    workers: int = 1,
) -> list[KeywordHit]:
    """Report every occurrence of every keyword, ASCII case-insensitively, sorted by offset."""
    matchers = _matchers(keywords, encodings)
    if not matchers or not len(stream):
        return []
    longest = max(len(m.needle) for m in matchers)
    overlap = _check_overlap(overlap, longest + context + 2)

    def scan(data, base, lo, hi, _total):
        lowered = bytes(data).lower()
        hits = []
        for m in matchers:
            for p in m.positions(data, lowered, lo - base, hi - base):
                raw = data[p : p + len(m.needle)]
                hits.append(
                    KeywordHit(
                        offset=base + p,
                        encoding=m.encoding,
                        keyword=m.keyword,
                        text=_decode(raw, m.encoding),
                        length=len(raw),
                        context=_context(data, p, len(raw), m.encoding, context),
                    )
                )
        return hits

    return sorted(_run_chunked(stream, chunk_size, overlap, workers, scan))


# -- path extraction ---------------------------------------------------------------


def _units(data, start: int, end: int, encoding: str) -> list[int]:
    chunk = bytes(data[start:end])
    if encoding == UTF16LE:
        chunk = chunk[: len(chunk) - len(chunk) % 2]
        return list(memoryview(chunk).cast("H")) if chunk else []
    return list(chunk)


def _path_char_ok(u: int, encoding: str) -> bool:
    if 0x20 <= u <= 0x7E:
        return chr(u) not in _PATH_FORBIDDEN
    if encoding != UTF16LE or u < 0xA0 or 0xD800 <= u <= 0xDFFF or u >= 0xFFFD:
        return False
    return unicodedata.category(chr(u)) not in ("Cc", "Cf", "Zl", "Zp")


def _extract_path(data, pos: int, kw_len: int, encoding: str) -> tuple[int, str] | None:
    """Grow a ``X:\\...`` path around a segment hit at ``pos``; return (start, text)."""
    w = 2 if encoding == UTF16LE else 1
    left_start = max(0, pos - MAX_PATH_CHARS * w)
    left_start += (pos - left_start) % w
    left = _units(data, left_start, pos, encoding)
    i = len(left)
    while i > 0 and _path_char_ok(left[i - 1], encoding):
        i -= 1
    run = left[i:]
    colon = max((k for k, u in enumerate(run) if u == 0x3A), default=-1)
    if colon < 1 or colon + 1 >= len(run) or run[colon + 1] != 0x5C:
        return None
    if not (0x41 <= run[colon - 1] <= 0x5A or 0x61 <= run[colon - 1] <= 0x7A):
        return None
    head = run[colon - 1 :]

    right = _units(data, pos, min(len(data), pos + (MAX_PATH_CHARS + kw_len) * w), encoding)
    j = 0
    while j < len(right) and right[j] != 0x3A and _path_char_ok(right[j], encoding):
        j += 1
    text = "".join(map(chr, head + right[:j]))
    cut = _EXE_END.search(text, len(head))
    if cut:
        text = text[: cut.end()]
    text = text.rstrip(" .")
    start = pos - len(head) * w
    return start, text


def find_tor_paths(
    stream,
    segments: Sequence[str] = (TOR_SEGMENT,),
    *,
    chunk_size: int | None = None,
    overlap: int | None = None,
    workers: int = 1,
) -> list[PathHit]:
    """Locate absolute paths running through a Tor install directory, in both encodings."""
    matchers = _matchers(segments, ENCODINGS)
    if not matchers or not len(stream):
        return []
    longest = max(len(m.needle) for m in matchers)
    overlap = _check_overlap(overlap, 2 * (2 * MAX_PATH_CHARS + longest) + 4)
    segs = tuple(segments)

    def scan(data, base, lo, hi, _total):
        lowered = bytes(data).lower()
        hits = []
        for m in matchers:
            for p in m.positions(data, lowered, lo - base, hi - base):
                found = _extract_path(data, p, len(m.keyword), m.encoding)
                if found is None:
                    continue
                start, text = found
                attribution = classify_path(text, segs)
                if not attribution.is_tor:
                    continue
                length = len(_encode(text, m.encoding))
                hits.append(PathHit(base + start, m.encoding, text, length, attribution))
        return hits

    return _dedupe(_run_chunked(stream, chunk_size, overlap, workers, scan))


def _dedupe(hits: list[T]) -> list[T]:
    out: dict = {}
    for h in sorted(hits):
        out.setdefault((h.offset, h.encoding), h)
    return list(out.values())


# -- URLs ----------------------------------------------------------------------------


def find_urls(
    stream,
    prefixes: Sequence[str] = ("http://", "https://"),
    *,
    chunk_size: int | None = None,
    overlap: int | None = None,
    workers: int = 1,
) -> list[UrlHit]:
    matchers = _matchers(prefixes, ENCODINGS)
    if not matchers or not len(stream):
        return []
    longest = max(len(m.needle) for m in matchers)
    overlap = _check_overlap(overlap, longest + 2 * MAX_URL_CHARS + 2)

    def scan(data, base, lo, hi, _total):
        lowered = bytes(data).lower()
        hits = []
        for m in matchers:
            w = 2 if m.encoding == UTF16LE else 1
            for p in m.positions(data, lowered, lo - base, hi - base):
                body = p + len(m.needle)
                units = _units(data, body, min(len(data), body + MAX_URL_CHARS * w), m.encoding)
                n = 0
                while n < len(units) and units[n] < 0x80 and units[n] in _URL_CHARS:
                    n += 1
                if n == 0:
                    continue
                end = body + n * w
                hits.append(UrlHit(base + p, m.encoding, _decode(data[p:end], m.encoding), end - p))
        return hits

    return sorted(_run_chunked(stream, chunk_size, overlap, workers, scan))


# -- obfs4 endpoints -------------------------------------------------------------------


def find_obfs4_endpoints(
    stream,
    window: int = DEFAULT_ENDPOINT_WINDOW,
    keyword: str = "obfs4",
    *,
    chunk_size: int | None = None,
    overlap: int | None = None,
    workers: int = 1,
) -> list[EndpointHit]:
    """Find ``a.b.c.d[:port]`` text within ``window`` bytes of each obfs4 keyword hit.

    An address near several keyword hits is reported once, against the
    nearest one.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    matchers = _matchers([keyword], ENCODINGS)
    if not matchers or not len(stream):
        return []
    margin = 24  # longest "255.255.255.255:65535" plus slack, in characters
    longest = max(len(m.needle) for m in matchers)
    overlap = _check_overlap(overlap, window + longest + 2 * margin + 4)

    def scan(data, base, lo, hi, _total):
        lowered = bytes(data).lower()
        hits = []
        for m in matchers:
            w = 2 if m.encoding == UTF16LE else 1
            for p in m.positions(data, lowered, lo - base, hi - base):
                kw_end = p + len(m.needle)
                win_lo, win_hi = max(0, p - window), min(len(data), kw_end + window)
                start = max(0, win_lo - margin * w)
                start += (p - start) % w
                end = min(len(data), win_hi + margin * w)
                text = "".join(
                    chr(u) if u < 0x80 else "\x00" for u in _units(data, start, end, m.encoding)
                )
                for am in _IPV4.finditer(text):
                    a_lo, a_hi = start + am.start() * w, start + am.end() * w
                    if a_lo < win_lo or a_hi > win_hi:
                        continue
                    octets = [int(g) for g in am.groups()[:4]]
                    if any(o > 255 for o in octets):
                        continue
                    port = int(am.group(5)) if am.group(5) else None
                    if port is not None and not 1 <= port <= 65535:
                        port = None
                        a_hi = start + am.end(4) * w
                    distance = a_lo - kw_end if a_lo >= kw_end else max(0, p - a_hi)
                    hits.append(
                        EndpointHit(
                            offset=base + a_lo,
                            encoding=m.encoding,
                            address=".".join(map(str, octets)),
                            port=port,
                            anchor_offset=base + p,
                            distance=distance,
                            text=_decode(data[a_lo:a_hi], m.encoding),
                            length=a_hi - a_lo,
                        )
                    )
        return hits

    nearest: dict[tuple[int, str], EndpointHit] = {}
    for h in _run_chunked(stream, chunk_size, overlap, workers, scan):
        key = (h.offset, h.encoding)
        cur = nearest.get(key)
        if cur is None or (h.distance, h.anchor_offset) < (cur.distance, cur.anchor_offset):
            nearest[key] = h
    return sorted(nearest.values())


# -- record carving --------------------------------------------------------------------


def carve_shellactivity_records(
    stream,
    max_record_len: int = DEFAULT_MAX_RECORD_LEN,
    *,
    chunk_size: int | None = None,
    overlap: int | None = None,
    workers: int = 1,
) -> list[CarvedRecord]:
    """Carve records by their D2 14 header and CA 50 00 00 footer.

    A header whose record cannot be completed within ``max_record_len`` bytes
    yields an incomplete carve holding the raw span. Complete carves consume
    their bytes: headers inside them are not tried again.
    """
    if max_record_len <= 0:
        raise ValueError("max_record_len must be positive")
    if not len(stream):
        return []
    overlap = _check_overlap(overlap, max_record_len + 2)

    def scan(data, base, lo, hi, total):
        out = []
        pos = lo - base
        stop = hi - base
        limit_total = total - base
        while True:
            pos = data.find(RECORD_HEADER, pos, stop + 1)
            if pos < 0 or pos >= stop:
                break
            bound = min(pos + max_record_len, limit_total, len(data))
            try:
                record, nxt = parse_record(data, pos, bound)
            except DelimiterNotFound:
                out.append(CarvedRecord(base + pos, False, None, bytes(data[pos:bound])))
            else:
                record = replace(record, raw_extent=(base + pos, base + nxt))
                out.append(CarvedRecord(base + pos, True, record, record.raw))
            pos += 1
        return out

    candidates = sorted(
        _run_chunked(stream, chunk_size, overlap, workers, scan), key=lambda c: c.source_offset
    )
    carved = []
    consumed_to = -1
    for c in candidates:
        if c.source_offset < consumed_to:
            continue
        carved.append(c)
        if c.complete:
            consumed_to = c.end_offset
    return carved
