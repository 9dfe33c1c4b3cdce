"""Windows FILETIME conversion.

A FILETIME is an unsigned 64-bit count of 100-nanosecond ticks since
1601-01-01T00:00:00 UTC. Python's datetime stops at microseconds, so the
sub-second part is carried separately as a tick remainder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import NamedTuple

TICKS_PER_SECOND = 10_000_000
EPOCH = datetime(1601, 1, 1, tzinfo=timezone.utc)
UNIX_EPOCH_FILETIME = 116_444_736_000_000_000

# Last representable tick of 9999-12-31T23:59:59.9999999.
_LAST = datetime(9999, 12, 31, 23, 59, 59, tzinfo=timezone.utc) - EPOCH
MAX_FILETIME = ((_LAST.days * 86400 + _LAST.seconds) + 1) * TICKS_PER_SECOND - 1


class OutOfRange(ValueError):
    """The value does not represent an instant in years 1601 to 9999."""


class UtcInstant(NamedTuple):
    """A UTC instant at second resolution plus a 100 ns remainder (0..9999999)."""

    when: datetime
    ticks: int = 0

    def isoformat(self) -> str:
        base = self.when.strftime("%Y-%m-%dT%H:%M:%S")
        if self.ticks:
            return f"{base}.{self.ticks:07d}Z"
        return base + "Z"


@dataclass(frozen=True, order=True)
class FiletimeTimestamp:
    raw: int

    def __post_init__(self) -> None:
        if not 0 <= self.raw <= 0xFFFFFFFFFFFFFFFF:
            raise OutOfRange(f"FILETIME must fit in 64 bits: {self.raw}")

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> FiletimeTimestamp:
        return cls(struct.unpack_from("<Q", data, offset)[0])

    def to_bytes(self) -> bytes:
        return struct.pack("<Q", self.raw)

    def to_utc(self) -> UtcInstant:
        return filetime_to_utc(self)

    def isoformat(self) -> str:
        return filetime_to_utc(self).isoformat()


def filetime_to_utc(ft: FiletimeTimestamp | int) -> UtcInstant:
    """Convert a FILETIME to a :class:`UtcInstant`.

    >>> filetime_to_utc(116444736000000000).isoformat()
    '1970-01-01T00:00:00Z'
    """
    raw = ft.raw if isinstance(ft, FiletimeTimestamp) else ft
    if raw < 0 or raw > MAX_FILETIME:
        raise OutOfRange(f"FILETIME {raw} is outside years 1601-9999")
    seconds, ticks = divmod(raw, TICKS_PER_SECOND)
    return UtcInstant(EPOCH + timedelta(seconds=seconds), ticks)


def utc_to_filetime(when: datetime | UtcInstant, ticks: int = 0) -> FiletimeTimestamp:
    """Inverse of :func:`filetime_to_utc`.

    Naive datetimes are taken to be UTC. Microseconds on ``when`` are folded
    into the tick count; ``ticks`` adds a further 100 ns remainder.
    """
    if isinstance(when, UtcInstant):
        when, ticks = when.when, when.ticks + ticks
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    delta = when - EPOCH
    raw = (delta.days * 86400 + delta.seconds) * TICKS_PER_SECOND + delta.microseconds * 10 + ticks
    if raw < 0 or raw > MAX_FILETIME:
        raise OutOfRange(f"{when.isoformat()} is outside years 1601-9999")
    return FiletimeTimestamp(raw)


def parse_instant(text: str) -> UtcInstant:
    """Parse an ISO-8601 instant, keeping up to seven fractional digits."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    frac = 0
    main = text
    if "." in text:
        head, rest = text.split(".", 1)
        digits = ""
        while rest and rest[0].isdigit():
            digits, rest = digits + rest[0], rest[1:]
        if len(digits) > 7:
            raise ValueError(f"more than 7 fractional digits: {text!r}")
        frac = int(digits.ljust(7, "0")) if digits else 0
        main = head + rest
    dt = datetime.fromisoformat(main)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return UtcInstant(dt.astimezone(timezone.utc), frac)
