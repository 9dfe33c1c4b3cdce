"""Indicator set shared by the scanners, the fixture generator and the pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .shellact import SHELLACTIVITIES_PATH

AUDIO_POLICY_PATH = (
    "Software\\Microsoft\\Internet Explorer\\LowRegistry\\Audio\\PolicyConfig\\PropertyStore"
)

URL_PREFIXES = ("http://", "https://")


class InvalidSignatureDb(ValueError):
    pass


@dataclass
class SignatureDb:
    process_names: list[str] = field(
        default_factory=lambda: ["firefox.exe", "tor.exe", "obfs4proxy.exe"]
    )
    # Install-directory segment names that tie an executable path to Tor.
    path_patterns: list[str] = field(default_factory=lambda: ["Tor Browser"])
    keywords: list[str] = field(default_factory=lambda: ["Tor Browser", "obfs4"])
    title_suffixes: list[str] = field(default_factory=lambda: [" - Tor Browser"])
    registry_key_paths: list[str] = field(
        default_factory=lambda: [SHELLACTIVITIES_PATH, AUDIO_POLICY_PATH]
    )

    @property
    def shellactivities_path(self) -> str:
        return next(
            (p for p in self.registry_key_paths if "shellactivities" in p.casefold()),
            SHELLACTIVITIES_PATH,
        )

    @property
    def audio_key_path(self) -> str:
        return next(
            (p for p in self.registry_key_paths if "policyconfig" in p.casefold()),
            AUDIO_POLICY_PATH,
        )

    def scan_strings(self) -> list[str]:
        """Every text indicator a scan over this db can report, deduplicated."""
        seen: dict[str, None] = {}
        for group in (self.keywords, self.process_names, self.path_patterns, URL_PREFIXES):
            for s in group:
                seen.setdefault(s, None)
        for s in self.title_suffixes:
            seen.setdefault(s.strip(" -\u2014"), None)
        return [s for s in seen if s]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SignatureDb:
        """Build a db where each field present in ``data`` replaces the default wholesale."""
        if not isinstance(data, dict):
            raise InvalidSignatureDb("signature db must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSignatureDb(f"unknown signature db fields: {sorted(unknown)}")
        for name, value in data.items():
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise InvalidSignatureDb(f"field {name!r} must be a list of strings")
        return cls(**{k: list(v) for k, v in data.items()})

    @classmethod
    def load(cls, path: str | Path) -> SignatureDb:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidSignatureDb(f"{path}: {exc}") from exc
        return cls.from_dict(data)
