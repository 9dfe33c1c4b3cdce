"""Read-only parser for Windows registry hive files (REGF).

Only the cells needed to walk an NTUSER.DAT hive are understood: key nodes
(``nk``), value records (``vk``), value lists, the subkey list variants
(``lf``, ``lh``, ``li``, ``ri``) and big-data records (``db``).

Cell offsets stored inside the hive are relative to the first hive bin,
which sits right after the 4096-byte base block.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

from .filetime import FiletimeTimestamp

BASE_BLOCK_SIZE = 4096
HBIN_HEADER_SIZE = 32
BIG_DATA_SEGMENT_SIZE = 16344

KEY_HIVE_ENTRY = 0x0004
KEY_COMP_NAME = 0x0020
VALUE_COMP_NAME = 0x0001

REG_NONE = 0
REG_SZ = 1
REG_EXPAND_SZ = 2
REG_BINARY = 3
REG_DWORD = 4
REG_DWORD_BIG_ENDIAN = 5
REG_LINK = 6
REG_MULTI_SZ = 7
REG_QWORD = 11

REG_TYPE_NAMES = {
    REG_NONE: "REG_NONE",
    REG_SZ: "REG_SZ",
    REG_EXPAND_SZ: "REG_EXPAND_SZ",
    REG_BINARY: "REG_BINARY",
    REG_DWORD: "REG_DWORD",
    REG_DWORD_BIG_ENDIAN: "REG_DWORD_BIG_ENDIAN",
    REG_LINK: "REG_LINK",
    REG_MULTI_SZ: "REG_MULTI_SZ",
    REG_QWORD: "REG_QWORD",
}

_INVALID_OFFSET = 0xFFFFFFFF


class HiveError(Exception):
    """Base class for hive parsing errors."""


class MalformedHive(HiveError):
    """The image is not a usable REGF file."""


class TruncatedHive(HiveError):
    """A structure extends past the end of the image."""


class MalformedCell(HiveError):
    """A cell is corrupt or of an unexpected type."""


class KeyNotFound(HiveError, KeyError):
    """A path component does not exist."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class HiveBin(NamedTuple):
    offset: int  # file offset of the "hbin" header
    size: int


@dataclass(frozen=True)
class KeyNode:
    name: str
    last_written: FiletimeTimestamp
    subkey_count: int
    value_count: int
    cell_offset: int
    path: str = ""
    flags: int = 0
    subkeys_offset: int = _INVALID_OFFSET
    values_offset: int = _INVALID_OFFSET


class DataLocator(NamedTuple):
    kind: str  # "inline", "cell" or "bigdata"
    inline: bytes = b""
    cell_offset: int = _INVALID_OFFSET


@dataclass(frozen=True)
class ValueRecord:
    name: str
    reg_type: int
    data_length: int
    data_locator: DataLocator
    cell_offset: int = _INVALID_OFFSET

    @property
    def type_name(self) -> str:
        return REG_TYPE_NAMES.get(self.reg_type, f"0x{self.reg_type:08x}")


@dataclass(frozen=True)
class HiveFile:
    raw: bytes
    root_cell_offset: int
    major_version: int
    minor_version: int
    sequence_primary: int
    sequence_secondary: int
    hive_bins: tuple[HiveBin, ...]
    checksum_ok: bool = True
    last_written: FiletimeTimestamp = field(default=FiletimeTimestamp(0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "_bin_starts", [b.offset for b in self.hive_bins])

    # -- cell access -------------------------------------------------------

    def _bin_for(self, file_offset: int) -> HiveBin | None:
        i = bisect.bisect_right(self._bin_starts, file_offset) - 1
        if i < 0:
            return None
        hbin = self.hive_bins[i]
        if file_offset < hbin.offset + hbin.size:
            return hbin
        return None

    def cell(self, offset: int) -> bytes:
        """Return the data of the cell at hive-relative ``offset`` (size field excluded)."""
        pos = BASE_BLOCK_SIZE + offset
        hbin = self._bin_for(pos)
        if hbin is None or pos < hbin.offset + HBIN_HEADER_SIZE:
            raise MalformedCell(f"cell offset 0x{offset:x} is outside every hive bin")
        end_of_bin = hbin.offset + hbin.size
        if pos + 4 > end_of_bin:
            raise MalformedCell(f"cell header at 0x{offset:x} crosses a bin boundary")
        (size,) = struct.unpack_from("<i", self.raw, pos)
        size = abs(size)
        if size < 8 or pos + size > end_of_bin:
            raise MalformedCell(f"cell at 0x{offset:x} has bad size {size}")
        return self.raw[pos + 4 : pos + size]

    def _key_node(self, offset: int, path: str) -> KeyNode:
        data = self.cell(offset)
        if len(data) < 76 or data[:2] != b"nk":
            raise MalformedCell(f"no key node at 0x{offset:x}")
        flags, last_written = struct.unpack_from("<HQ", data, 2)
        subkey_count, _volatile, subkeys_offset = struct.unpack_from("<III", data, 20)
        value_count, values_offset = struct.unpack_from("<II", data, 36)
        (name_len,) = struct.unpack_from("<H", data, 72)
        if 76 + name_len > len(data):
            raise MalformedCell(f"key name at 0x{offset:x} overruns its cell")
        raw_name = data[76 : 76 + name_len]
        if flags & KEY_COMP_NAME:
            name = raw_name.decode("latin-1")
        else:
            name = raw_name.decode("utf-16-le", errors="replace")
        return KeyNode(
            name=name,
            last_written=FiletimeTimestamp(last_written),
            subkey_count=subkey_count,
            value_count=value_count,
            cell_offset=offset,
            path=path,
            flags=flags,
            subkeys_offset=subkeys_offset,
            values_offset=values_offset,
        )

    # -- navigation ----------------------------------------------------------

    def root(self) -> KeyNode:
        return self._key_node(self.root_cell_offset, "")

    def list_subkeys(self, key: KeyNode) -> list[KeyNode]:
        if key.subkey_count == 0:
            return []
        offsets = list(self._subkey_offsets(key.subkeys_offset, depth=0))
        if len(offsets) != key.subkey_count:
            raise MalformedCell(
                f"key {key.path!r} declares {key.subkey_count} subkeys, lists {len(offsets)}"
            )
        children = []
        for off in offsets:
            child = self._key_node(off, "")
            path = f"{key.path}\\{child.name}" if key.path else child.name
            children.append(_with_path(child, path))
        return children

    def _subkey_offsets(self, list_offset: int, depth: int) -> Iterator[int]:
        if depth > 1:
            raise MalformedCell("nested index roots")
        data = self.cell(list_offset)
        if len(data) < 4:
            raise MalformedCell(f"subkey list at 0x{list_offset:x} is too short")
        sig = data[:2]
        (count,) = struct.unpack_from("<H", data, 2)
        stride = {b"lf": 8, b"lh": 8, b"li": 4, b"ri": 4}.get(sig)
        if stride is None:
            raise MalformedCell(f"unknown subkey list type {sig!r} at 0x{list_offset:x}")
        if 4 + count * stride > len(data):
            raise MalformedCell(f"subkey list at 0x{list_offset:x} overruns its cell")
        for i in range(count):
            (off,) = struct.unpack_from("<I", data, 4 + i * stride)
            if sig == b"ri":
                yield from self._subkey_offsets(off, depth + 1)
            else:
                yield off

    def get_key(self, path: str) -> KeyNode:
        """Walk ``path`` (backslash separated, case-insensitive) from the root."""
        key = self.root()
        parts = [p for p in path.strip("\\").split("\\") if p] if path else []
        for part in parts:
            wanted = part.casefold()
            for child in self.list_subkeys(key):
                if child.name.casefold() == wanted:
                    key = child
                    break
            else:
                where = key.path or "<root>"
                raise KeyNotFound(f"{part!r} not found under {where}")
        return key

    def list_values(self, key: KeyNode) -> list[ValueRecord]:
        if key.value_count == 0:
            return []
        data = self.cell(key.values_offset)
        if key.value_count * 4 > len(data):
            raise MalformedCell(f"value list of {key.path!r} overruns its cell")
        offsets = struct.unpack_from(f"<{key.value_count}I", data, 0)
        return [self._value_record(off) for off in offsets]

    def get_value(self, key: KeyNode, name: str) -> ValueRecord:
        wanted = name.casefold()
        for value in self.list_values(key):
            if value.name.casefold() == wanted:
                return value
        raise KeyNotFound(f"value {name!r} not found under {key.path or '<root>'}")

    def _value_record(self, offset: int) -> ValueRecord:
        data = self.cell(offset)
        if len(data) < 20 or data[:2] != b"vk":
            raise MalformedCell(f"no value record at 0x{offset:x}")
        name_len, size, data_offset, reg_type, flags = struct.unpack_from("<HIIIH", data, 2)
        if 20 + name_len > len(data):
            raise MalformedCell(f"value name at 0x{offset:x} overruns its cell")
        raw_name = data[20 : 20 + name_len]
        if flags & VALUE_COMP_NAME:
            name = raw_name.decode("latin-1")
        else:
            name = raw_name.decode("utf-16-le", errors="replace")

        if size & 0x80000000:
            length = size & 0x7FFFFFFF
            if length > 4:
                raise MalformedCell(f"inline value at 0x{offset:x} claims {length} bytes")
            locator = DataLocator("inline", struct.pack("<I", data_offset)[:length])
        elif size == 0:
            length = 0
            locator = DataLocator("inline", b"")
        else:
            length = size
            kind = "cell"
            if length > BIG_DATA_SEGMENT_SIZE and self.minor_version >= 4:
                try:
                    if self.cell(data_offset)[:2] == b"db":
                        kind = "bigdata"
                except MalformedCell:
                    pass
            locator = DataLocator(kind, b"", data_offset)
        return ValueRecord(name, reg_type, length, locator, offset)

    def read_value_data(self, value: ValueRecord) -> bytes:
        loc = value.data_locator
        if loc.kind == "inline":
            return loc.inline[: value.data_length]
        try:
            if loc.kind == "bigdata":
                return self._read_big_data(loc.cell_offset, value.data_length)
            data = self.cell(loc.cell_offset)
        except MalformedCell as exc:
            raise TruncatedHive(str(exc)) from exc
        if len(data) < value.data_length:
            raise TruncatedHive(
                f"value {value.name!r} wants {value.data_length} bytes, cell holds {len(data)}"
            )
        return data[: value.data_length]

    def _read_big_data(self, offset: int, length: int) -> bytes:
        header = self.cell(offset)
        if len(header) < 8:
            raise MalformedCell(f"big data record at 0x{offset:x} is too short")
        count, list_offset = struct.unpack_from("<HI", header, 2)
        seg_list = self.cell(list_offset)
        if count * 4 > len(seg_list):
            raise MalformedCell(f"big data segment list at 0x{list_offset:x} overruns its cell")
        parts = []
        remaining = length
        for seg_off in struct.unpack_from(f"<{count}I", seg_list, 0):
            if remaining <= 0:
                break
            seg = self.cell(seg_off)
            take = min(remaining, BIG_DATA_SEGMENT_SIZE)
            if len(seg) < take:
                raise TruncatedHive(f"big data segment at 0x{seg_off:x} is short")
            parts.append(seg[:take])
            remaining -= take
        if remaining > 0:
            raise TruncatedHive(f"big data at 0x{offset:x} is missing {remaining} bytes")
        return b"".join(parts)

    def walk(self, errors: list[tuple[str, str]] | None = None) -> Iterator[KeyNode]:
        """Depth-first walk of every key, root first.

        Corrupt subtrees are skipped; when ``errors`` is given each skip is
        appended to it as ``(path, reason)``.
        """
        stack = [self.root()]
        seen: set[int] = set()
        while stack:
            key = stack.pop()
            if key.cell_offset in seen:
                if errors is not None:
                    errors.append((key.path, "key node already visited (cycle)"))
                continue
            seen.add(key.cell_offset)
            yield key
            try:
                children = self.list_subkeys(key)
            except HiveError as exc:
                if errors is not None:
                    errors.append((key.path, str(exc)))
                continue
            stack.extend(reversed(children))

    def find_keys_matching(
        self, name_fragment: str, errors: list[tuple[str, str]] | None = None
    ) -> list[str]:
        wanted = name_fragment.casefold()
        return [
            key.path
            for key in self.walk(errors)
            if key.path and wanted in key.name.casefold()
        ]


def _with_path(key: KeyNode, path: str) -> KeyNode:
    return KeyNode(
        name=key.name,
        last_written=key.last_written,
        subkey_count=key.subkey_count,
        value_count=key.value_count,
        cell_offset=key.cell_offset,
        path=path,
        flags=key.flags,
        subkeys_offset=key.subkeys_offset,
        values_offset=key.values_offset,
    )


def base_block_checksum(block: bytes) -> int:
    checksum = 0
    for (dword,) in struct.iter_unpack("<I", block[:508]):
        checksum ^= dword
    if checksum == 0:
        return 1
    if checksum == 0xFFFFFFFF:
        return 0xFFFFFFFE
    return checksum


def open_hive(image: bytes) -> HiveFile:
    """Validate the base block, enumerate hive bins and resolve the root key."""
    raw = bytes(image)
    if len(raw) < BASE_BLOCK_SIZE:
        raise MalformedHive(f"image is {len(raw)} bytes, shorter than the base block")
    if raw[:4] != b"regf":
        raise MalformedHive(f"bad magic {raw[:4]!r}")
    seq1, seq2, last_written, major, minor = struct.unpack_from("<IIQII", raw, 4)
    root_offset, bins_size = struct.unpack_from("<II", raw, 36)
    (stored_checksum,) = struct.unpack_from("<I", raw, 508)
    if major != 1:
        raise MalformedHive(f"unsupported major version {major}")
    if minor > 6:
        raise MalformedHive(f"unsupported minor version {minor}")
    if bins_size % 4096 or bins_size == 0:
        raise MalformedHive(f"hive bins data size {bins_size} is not a positive multiple of 4096")
    end = BASE_BLOCK_SIZE + bins_size
    if end > len(raw):
        raise TruncatedHive(f"hive bins extend to {end}, image is {len(raw)} bytes")

    bins = []
    pos = BASE_BLOCK_SIZE
    while pos < end:
        if raw[pos : pos + 4] != b"hbin":
            raise MalformedHive(f"missing hbin signature at file offset 0x{pos:x}")
        rel, size = struct.unpack_from("<II", raw, pos + 4)
        if rel != pos - BASE_BLOCK_SIZE or size < 4096 or size % 4096:
            raise MalformedHive(f"inconsistent hive bin header at file offset 0x{pos:x}")
        if pos + size > end:
            raise TruncatedHive(f"hive bin at 0x{pos:x} overruns the hive bins data")
        bins.append(HiveBin(pos, size))
        pos += size

    hive = HiveFile(
        raw=raw,
        root_cell_offset=root_offset,
        major_version=major,
        minor_version=minor,
        sequence_primary=seq1,
        sequence_secondary=seq2,
        hive_bins=tuple(bins),
        checksum_ok=stored_checksum == base_block_checksum(raw),
        last_written=FiletimeTimestamp(last_written),
    )
    try:
        hive.root()
    except MalformedCell as exc:
        raise MalformedHive(f"root cell does not resolve to a key node: {exc}") from exc
    return hive
