"""Deterministic fixture generation.

Three generators, each the inverse of a parser elsewhere in the package:

* :func:`build_shellactivities_blob` encodes records for ``shellact``;
* :func:`build_minimal_hive` writes a REGF image for ``hive``;
* :func:`plant_in_noise` copies payloads into seeded random bytes that are
  scrubbed of every signature the scanners look for.

All output is a pure function of the inputs (and the seed), so fixtures are
kept as manifests rather than binary files.
"""

from __future__ import annotations

import bisect
import json
import random
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

from .carver import ENCODINGS, UTF16LE, _Matcher
from .filetime import FiletimeTimestamp, UtcInstant, parse_instant, utc_to_filetime
from .hive import (
    BASE_BLOCK_SIZE,
    BIG_DATA_SEGMENT_SIZE,
    HBIN_HEADER_SIZE,
    KEY_COMP_NAME,
    KEY_HIVE_ENTRY,
    REG_BINARY,
    VALUE_COMP_NAME,
    base_block_checksum,
)
from .shellact import (
    DEFAULT_HEADER_VALUES,
    DELIMITERS,
    FOOTER,
    HEADER_MAGIC,
    MID_MARKER,
    NAME_END,
    RECORD_HEADER,
    SECOND_TRAILER,
    SHELLACTIVITIES_PATH,
    TITLE_END,
    TRAILER_CONST,
    UTF8,
    ShellActivityRecord,
    encode_text,
)
from .sigdb import AUDIO_POLICY_PATH, SignatureDb

REFERENCE_INSTANT = "2018-04-03T14:09:47Z"
STANDARD_PATH = "C:\\Users\\40187070\\Desktop\\Tor Browser\\Browser\\firefox.exe"
PORTABLE_PATH = "E:\\Tor Browser\\Browser\\firefox.exe"
SOUNDCLOUD_TITLE = (
    "Monolake Live at Ego Düsseldorf June 5 1999 by monolake | "
    "Free Listening on SoundCloud - Tor Browser"
)
SOUNDCLOUD_URL = "https://soundcloud.com/monolake/liveego1999"


class SynthError(ValueError):
    pass


class DelimiterCollision(SynthError):
    """A string field encodes to bytes containing a record signature."""


class OverlapError(SynthError):
    pass


class NoiseError(SynthError):
    """Scrubbing signatures out of the noise did not converge."""


def _as_filetime(when) -> FiletimeTimestamp:
    if isinstance(when, FiletimeTimestamp):
        return when
    if isinstance(when, str):
        return utc_to_filetime(parse_instant(when))
    if isinstance(when, (datetime, UtcInstant)):
        return utc_to_filetime(when)
    return FiletimeTimestamp(int(when))


# -- shellactivities ----------------------------------------------------------------


def encode_record(rec: ShellActivityRecord) -> bytes:
    encs = rec.field_encodings
    parts = {
        "exe_path": encode_text(rec.exe_path, encs[0]),
        "exe_name": encode_text(rec.exe_name, encs[1]),
        "page_title": encode_text(rec.page_title, encs[2]),
    }
    for name, data in parts.items():
        for sig in DELIMITERS:
            if sig in data:
                raise DelimiterCollision(f"{name} encodes bytes containing {sig.hex()}")
    if len(rec.trailer_a5) != 5 or len(rec.trailer_b5) != 5 or len(rec.mid_marker) != 8:
        raise SynthError("trailer fields must be 5 bytes and the marker 8 bytes")
    return b"".join(
        (
            RECORD_HEADER,
            bytes([rec.type_byte]),
            parts["exe_path"],
            rec.mid_marker,
            parts["exe_name"],
            NAME_END,
            bytes([rec.d228_byte]),
            parts["page_title"],
            TITLE_END,
            rec.trailer_a5,
            TRAILER_CONST,
            SECOND_TRAILER,
            rec.trailer_b5,
            TRAILER_CONST,
            FOOTER,
        )
    )


def build_shellactivities_blob(
    header_time, records: Iterable[ShellActivityRecord], header_values: bytes = DEFAULT_HEADER_VALUES
) -> bytes:
    if len(header_values) != 8:
        raise SynthError("header values must be 8 bytes")
    head = HEADER_MAGIC + _as_filetime(header_time).to_bytes() + bytes(4) + header_values
    return head + b"".join(encode_record(r) for r in records)


# Characters drawn for random strings: printable ASCII, accented Latin, Greek,
# Cyrillic, CJK and a few astral-plane symbols.
_ALPHABET_RANGES = (
    (0x20, 0x7E),
    (0xC0, 0xFF),
    (0x391, 0x3C9),
    (0x410, 0x44F),
    (0x4E00, 0x4FFF),
    (0x1F600, 0x1F64F),
)


def _random_text(rng: random.Random, length: int, exclude: str = "") -> str:
    out = []
    while len(out) < length:
        lo, hi = rng.choice(_ALPHABET_RANGES)
        ch = chr(rng.randint(lo, hi))
        if ch not in exclude:
            out.append(ch)
    return "".join(out)


def _clean_for(text: str, encoding: str) -> bool:
    data = encode_text(text, encoding)
    return not any(sig in data for sig in DELIMITERS)


def random_record(rng: random.Random, encoding: str | None = None, max_len: int = 512) -> ShellActivityRecord:
    """A random record whose strings avoid every delimiter in their encoding."""
    encoding = encoding or rng.choice((UTF16LE, UTF8))
    bad_path_chars = '\\/:*?"<>|'
    while True:
        name = _random_text(rng, rng.randint(1, 40), bad_path_chars).strip() or "x"
        name = name + rng.choice((".exe", ".EXE", ""))
        drive = rng.choice("ABCDEFGHIJKLMNOPQRSTUVWXYZ")
        dirs = [
            _random_text(rng, rng.randint(1, 30), bad_path_chars).strip() or "d"
            for _ in range(rng.randint(0, 8))
        ]
        path = "\\".join([f"{drive}:"] + dirs + [name])
        if len(path) > max_len:
            path = f"{drive}:\\{name}"
        if len(path) > max_len:
            continue
        title = _random_text(rng, rng.randint(1, max_len))
        if all(_clean_for(s, encoding) for s in (path, name, title)):
            break
    return ShellActivityRecord(
        exe_path=path,
        exe_name=name,
        page_title=title,
        type_byte=rng.randrange(256),
        d228_byte=rng.randrange(256),
        trailer_a5=rng.randbytes(5),
        trailer_b5=rng.randbytes(5),
        string_encoding=encoding,
    )


def sample_record(path: str = STANDARD_PATH, title: str = SOUNDCLOUD_TITLE, **kw) -> ShellActivityRecord:
    return ShellActivityRecord(exe_path=path, exe_name=path.rsplit("\\", 1)[-1], page_title=title, **kw)


# -- registry hive ----------------------------------------------------------------------


def _align8(n: int) -> int:
    return (n + 7) & ~7


def _name_bytes(name: str) -> tuple[bytes, bool]:
    try:
        return name.encode("latin-1"), True
    except UnicodeEncodeError:
        return name.encode("utf-16-le"), False


def _lh_hash(name: str) -> int:
    h = 0
    for ch in name.upper():
        h = (h * 37 + ord(ch)) & 0xFFFFFFFF
    return h


class _CellWriter:
    """Lays cells out into hive bins; a bin grows past 4096 bytes only for a big cell."""

    def __init__(self, timestamp: int):
        self.buf = bytearray()
        self.bin_start = 0
        self.bin_end = 0
        self.timestamp = timestamp

    def _free_rest(self) -> None:
        rest = self.bin_end - len(self.buf)
        if rest:
            self.buf += struct.pack("<i", rest) + bytes(rest - 4)

    def _new_bin(self, need: int) -> None:
        self._free_rest()
        size = -(-(need + HBIN_HEADER_SIZE) // 4096) * 4096
        self.bin_start = len(self.buf)
        self.bin_end = self.bin_start + size
        self.buf += b"hbin" + struct.pack("<IIQQI", self.bin_start, size, 0, self.timestamp, 0)

    def alloc(self, data_len: int) -> int:
        size = _align8(data_len + 4)
        if len(self.buf) + size > self.bin_end:
            self._new_bin(size)
        offset = len(self.buf)
        self.buf += struct.pack("<i", -size) + bytes(size - 4)
        return offset

    def write(self, offset: int, data: bytes) -> None:
        (size,) = struct.unpack_from("<i", self.buf, offset)
        assert len(data) <= -size - 4
        self.buf[offset + 4 : offset + 4 + len(data)] = data

    def put(self, data: bytes) -> int:
        off = self.alloc(len(data))
        self.write(off, data)
        return off

    def finish(self) -> bytes:
        self._free_rest()
        return bytes(self.buf)


@dataclass
class _Key:
    name: str
    children: dict[str, "_Key"] = field(default_factory=dict)
    values: list[tuple[str, int, bytes]] = field(default_factory=list)


def build_minimal_hive(
    entries: Iterable[tuple[str, Sequence[tuple[str, int, bytes]]]],
    *,
    root_name: str = "ROOT",
    leaf_kind: str = "lh",
    max_leaf: int = 512,
    minor_version: int = 5,
    timestamp=REFERENCE_INSTANT,
) -> bytes:
    """Write a REGF image holding exactly ``entries`` (plus their ancestor keys).

    Subkeys are stored sorted by upper-cased name, as Windows does. More than
    ``max_leaf`` children go through an ``ri`` index root. Values longer than
    16344 bytes use big-data cells.
    """
    if leaf_kind not in ("lh", "lf", "li"):
        raise SynthError(f"unknown leaf kind {leaf_kind!r}")
    ft = _as_filetime(timestamp).raw
    root = _Key(root_name)
    for path, values in entries:
        node = root
        for part in [p for p in path.split("\\") if p]:
            node = node.children.setdefault(part.upper(), _Key(part))
        node.values.extend(values)

    w = _CellWriter(ft)

    def leaf(children: list[tuple[int, str]]) -> int:
        count = len(children)
        if leaf_kind == "li":
            body = b"li" + struct.pack("<H", count) + b"".join(struct.pack("<I", o) for o, _ in children)
        else:
            items = []
            for off, name in children:
                if leaf_kind == "lh":
                    hint = struct.pack("<I", _lh_hash(name))
                else:
                    hint = (name.encode("latin-1", "replace") + bytes(4))[:4]
                items.append(struct.pack("<I", off) + hint)
            body = leaf_kind.encode() + struct.pack("<H", count) + b"".join(items)
        return w.put(body)

    def value_cell(name: str, reg_type: int, data: bytes) -> int:
        raw_name, compressed = _name_bytes(name)
        length = len(data)
        if length <= 4:
            size_field = length | 0x80000000
            data_field = struct.unpack("<I", data.ljust(4, b"\x00"))[0]
        elif length > BIG_DATA_SEGMENT_SIZE and minor_version >= 4:
            segs = [
                w.put(data[i : i + BIG_DATA_SEGMENT_SIZE])
                for i in range(0, length, BIG_DATA_SEGMENT_SIZE)
            ]
            seg_list = w.put(b"".join(struct.pack("<I", s) for s in segs))
            data_field = w.put(b"db" + struct.pack("<HI", len(segs), seg_list))
            size_field = length
        else:
            data_field = w.put(data)
            size_field = length
        flags = VALUE_COMP_NAME if compressed else 0
        body = b"vk" + struct.pack("<HIIIHH", len(raw_name), size_field, data_field, reg_type, flags, 0)
        return w.put(body + raw_name)

    def key_cell(key: _Key, parent: int, is_root: bool) -> int:
        raw_name, compressed = _name_bytes(key.name)
        offset = w.alloc(76 + len(raw_name))
        children = sorted(key.children.values(), key=lambda k: k.name.upper())
        child_offs = [(key_cell(c, offset, False), c.name) for c in children]
        if not child_offs:
            subkeys = 0xFFFFFFFF
        elif len(child_offs) <= max_leaf:
            subkeys = leaf(child_offs)
        else:
            leaves = [leaf(child_offs[i : i + max_leaf]) for i in range(0, len(child_offs), max_leaf)]
            subkeys = w.put(b"ri" + struct.pack("<H", len(leaves)) + b"".join(struct.pack("<I", o) for o in leaves))
        if key.values:
            vals = [value_cell(*v) for v in key.values]
            values = w.put(b"".join(struct.pack("<I", v) for v in vals))
        else:
            values = 0xFFFFFFFF
        flags = (KEY_COMP_NAME if compressed else 0) | (KEY_HIVE_ENTRY if is_root else 0)
        body = b"nk" + struct.pack(
            "<HQ15IHH",
            flags,
            ft,
            0,  # access bits
            parent,
            len(child_offs),
            0,  # volatile subkeys
            subkeys,
            0xFFFFFFFF,
            len(key.values),
            values,
            0xFFFFFFFF,  # security
            0xFFFFFFFF,  # class name
            0, 0, 0, 0, 0,  # largest name/class/value sizes, workvar
            len(raw_name),
            0,
        )
        w.write(offset, body + raw_name)
        return offset

    root_offset = key_cell(root, 0xFFFFFFFF, True)
    bins = w.finish()

    base = bytearray(BASE_BLOCK_SIZE)
    struct.pack_into("<4sIIQIIIIII", base, 0, b"regf", 1, 1, ft, 1, minor_version, 0, 1, root_offset, len(bins))
    struct.pack_into("<I", base, 44, 1)
    base[48 : 48 + 64] = "synthetic\\NTUSER.DAT".encode("utf-16-le").ljust(64, b"\x00")
    struct.pack_into("<I", base, 508, base_block_checksum(bytes(base)))
    return bytes(base) + bins


# -- noise planting ------------------------------------------------------------------------


@dataclass(frozen=True)
class Plant:
    offset: int
    kind: str
    payload: bytes
    encoding: str = "binary"

    @property
    def end(self) -> int:
        return self.offset + len(self.payload)


@dataclass
class PlantManifest:
    seed: int
    stream_length: int
    plants: list[Plant] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stream_length": self.stream_length,
            "plants": [
                {"offset": p.offset, "kind": p.kind, "encoding": p.encoding, "payload_hex": p.payload.hex()}
                for p in self.plants
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PlantManifest:
        plants = [
            Plant(int(p["offset"]), str(p["kind"]), bytes.fromhex(p["payload_hex"]), str(p.get("encoding", "binary")))
            for p in data.get("plants", [])
        ]
        return cls(int(data["seed"]), int(data["stream_length"]), plants)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> PlantManifest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_plant_text(text: str, encoding: str) -> bytes:
    return text.encode("utf-16-le" if encoding == UTF16LE else "utf-8")


def scatter_plants(
    seed: int,
    stream_length: int,
    payloads: Sequence[tuple[str, bytes, str]],
    min_gap: int = 64,
) -> PlantManifest:
    """Place payloads at seeded random, non-overlapping offsets."""
    rng = random.Random(seed ^ 0x5EED)
    total = sum(len(p) for _, p, _ in payloads) + min_gap * (len(payloads) + 1)
    if total > stream_length:
        raise OverlapError("payloads do not fit in the stream")
    slack = stream_length - total
    cuts = sorted(rng.randrange(slack + 1) for _ in payloads)
    plants = []
    pos = min_gap
    prev = 0
    for (kind, payload, encoding), cut in zip(payloads, cuts):
        pos += cut - prev
        prev = cut
        plants.append(Plant(pos, kind, payload, encoding))
        pos += len(payload) + min_gap
    return PlantManifest(seed, stream_length, plants)


def forbidden_signatures(db: SignatureDb | None = None) -> list[bytes | _Matcher]:
    db = db or SignatureDb()
    sigs: list = [RECORD_HEADER, FOOTER]
    for s in db.scan_strings():
        sigs.extend(_Matcher(s, enc) for enc in ENCODINGS)
    return sigs


def _find_signatures(buf, sigs, lo: int, hi: int, lowered: bytes) -> list[tuple[int, int]]:
    found = []
    for sig in sigs:
        if isinstance(sig, bytes):
            pos = lo
            while (pos := buf.find(sig, pos, hi)) >= 0:
                found.append((pos, pos + len(sig)))
                pos += 1
        else:
            for pos in sig.positions(buf, lowered, lo, max(lo, hi - len(sig.needle) + 1)):
                found.append((pos, pos + len(sig.needle)))
    return found


def plant_in_noise(manifest: PlantManifest, db: SignatureDb | None = None, max_rounds: int = 1000) -> bytes:
    """Seeded noise with every plant copied in and no signature outside the plants."""
    n = manifest.stream_length
    plants = sorted(manifest.plants, key=lambda p: p.offset)
    for p in plants:
        if p.offset < 0 or p.end > n:
            raise OverlapError(f"plant at {p.offset} is out of bounds")
    for a, b in zip(plants, plants[1:]):
        if b.offset < a.end:
            raise OverlapError(f"plants at {a.offset} and {b.offset} overlap")

    rng = random.Random(manifest.seed)
    # randbytes() works on one big int; large streams are drawn in blocks.
    block = 16 << 20
    buf = bytearray()
    for lo in range(0, n, block):
        buf += rng.randbytes(min(block, n - lo))
    for p in plants:
        buf[p.offset : p.end] = p.payload
    starts = [p.offset for p in plants]

    def plant_at(pos: int) -> Plant | None:
        i = bisect.bisect_right(starts, pos) - 1
        if i >= 0 and pos < plants[i].end:
            return plants[i]
        return None

    sigs = forbidden_signatures(db)
    longest = max(len(s) if isinstance(s, bytes) else len(s.needle) for s in sigs)
    step = 16 << 20
    windows = [(lo, min(n, lo + step + longest)) for lo in range(0, n, step)]
    for _ in range(max_rounds):
        dirty = []
        for lo, hi in windows:
            lowered = bytes(buf[lo:hi]).lower()
            view = bytes(buf[lo:hi])
            for s, e in _find_signatures(view, sigs, 0, hi - lo, lowered):
                s, e = s + lo, e + lo
                first = plant_at(s)
                if first is not None and e <= first.end:
                    continue
                noise = [i for i in range(s, e) if plant_at(i) is None]
                if not noise:
                    continue
                for i in noise:
                    buf[i] = rng.randrange(256)
                dirty.append((max(0, s - longest), min(n, e + longest)))
        if not dirty:
            return bytes(buf)
        dirty.sort()
        windows = [dirty[0]]
        for lo, hi in dirty[1:]:
            if lo <= windows[-1][1]:
                windows[-1] = (windows[-1][0], max(windows[-1][1], hi))
            else:
                windows.append((lo, hi))
    raise NoiseError(f"signatures still present after {max_rounds} rounds")


# -- synthetic case ------------------------------------------------------------------------


CASE_TITLES = (
    SOUNDCLOUD_TITLE,
    "moog mother 32 - Google-Suche - Tor Browser",
)
PORTABLE_TITLE = "The Guardian - Tor Browser"
BRIDGE_TEXT = "Bridge obfs4 192.0.2.7:443 cert=synthetic iat-mode=0"
AUDIO_VALUE_NAME = "{9855c4cd-df8c-449c-a181-8191b68bd06c},0"


def case_records() -> list[ShellActivityRecord]:
    return [sample_record(STANDARD_PATH, t, d228_byte=i) for i, t in enumerate(CASE_TITLES)]


def build_case(outdir: str | Path, seed: int = 40187070, size: int = 1 << 20) -> dict:
    """Write a hive, a memory image, a raw image and a case file for an end-to-end run.

    Returns the case description, which is also written to ``case.json``.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    records = case_records()
    blob = build_shellactivities_blob(REFERENCE_INSTANT, records)
    audio_data = (
        "\\Device\\HarddiskVolume2\\Users\\40187070\\Desktop\\Tor Browser\\Browser\\firefox.exe"
    ).encode("utf-16-le") + b"\x00\x00"
    hive = build_minimal_hive(
        [
            (SHELLACTIVITIES_PATH, [("Data", REG_BINARY, blob)]),
            (AUDIO_POLICY_PATH + "\\00000000", [(AUDIO_VALUE_NAME, REG_BINARY, audio_data)]),
            ("Software\\Microsoft\\Windows\\CurrentVersion\\Explorer", []),
        ]
    )
    (out / "NTUSER.DAT").write_bytes(hive)

    # Text plants are NUL-terminated, as strings usually are in memory.
    u16 = lambda s: encode_plant_text(s, UTF16LE) + b"\x00\x00"  # noqa: E731
    a8 = lambda s: encode_plant_text(s, "ascii") + b"\x00"  # noqa: E731
    memory = scatter_plants(
        seed,
        size,
        [
            ("process", a8("tor.exe"), "ascii"),
            ("process", u16("obfs4proxy.exe"), UTF16LE),
            ("process", a8("firefox.exe"), "ascii"),
            ("process", u16("firefox.exe"), UTF16LE),
            ("path", u16(STANDARD_PATH), UTF16LE),
        ],
    )
    raw = scatter_plants(
        seed + 1,
        size,
        [
            ("endpoint", a8(BRIDGE_TEXT), "ascii"),
            ("path", u16(PORTABLE_PATH), UTF16LE),
            ("url", a8(SOUNDCLOUD_URL), "ascii"),
            ("record", encode_record(records[0]), "binary"),
            ("record", encode_record(sample_record(PORTABLE_PATH, PORTABLE_TITLE)), "binary"),
        ],
    )
    (out / "memory.raw").write_bytes(plant_in_noise(memory))
    (out / "unallocated.bin").write_bytes(plant_in_noise(raw))
    memory.dump(out / "memory.manifest.json")
    raw.dump(out / "unallocated.manifest.json")

    case = {
        "case_id": "synthetic-tbb-case",
        "report_time": "2018-04-03T15:00:00Z",
        "locale_words": ["Suche"],
        "sources": [
            {"id": "ntuser", "role": "hive", "path": "NTUSER.DAT"},
            {"id": "memdump", "role": "memory", "path": "memory.raw"},
            {"id": "unalloc", "role": "raw", "path": "unallocated.bin"},
        ],
    }
    (out / "case.json").write_text(json.dumps(case, indent=2) + "\n", encoding="utf-8")
    return case
