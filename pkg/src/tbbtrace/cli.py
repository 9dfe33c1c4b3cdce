"""Command line entry point: ``tbbtrace <command> ...``.

Exit codes: 0 when a command ran (whether or not anything was found),
2 when an input could not be read or parsed, 3 for invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .carver import (
    DEFAULT_MAX_RECORD_LEN,
    carve_shellactivity_records,
    find_obfs4_endpoints,
    find_tor_paths,
    find_urls,
    keyword_scan,
    open_stream,
)
from .filetime import OutOfRange, parse_instant
from .hive import REG_BINARY, HiveError, HiveFile, KeyNode, open_hive
from .memscan import scan_memory_image
from .pipeline import CaseInputs, InvalidCase, run_methodology
from .report import render_report
from .shellact import (
    ShellActivityError,
    ShellActivityLog,
    classify_record,
    parse_shellactivities,
    trailer_timestamp_hint,
)
from .sigdb import URL_PREFIXES, InvalidSignatureDb, SignatureDb
from .synth import (
    REFERENCE_INSTANT,
    PlantManifest,
    SynthError,
    build_case,
    build_minimal_hive,
    build_shellactivities_blob,
    sample_record,
    plant_in_noise,
)

EXIT_OK = 0
EXIT_UNREADABLE = 2
EXIT_CONFIG = 3


class InputUnreadable(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Usage errors are configuration errors; 2 is reserved for unreadable input.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--db", metavar="FILE", default=d(None), help="signature database override (JSON)")
    p.add_argument("--format", choices=("human", "machine"), default=d("human"))
    p.add_argument("--case-id", default=d(None))
    p.add_argument("--report-time", metavar="INSTANT", default=d(None), help="e.g. 2018-04-03T15:00:00Z")
    p.add_argument("--chunk-size", type=_positive_int, default=d(None), help="scan in chunks of N bytes")
    p.add_argument("--max-record-len", type=_positive_int, default=d(DEFAULT_MAX_RECORD_LEN))
    p.add_argument("--workers", type=_positive_int, default=d(1), help="threads for chunked scans")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _add_globals(common, suppress=True)

    parser = _Parser(prog="tbbtrace", description="Tor Browser artefact recovery from Windows evidence.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    hive = sub.add_parser("hive", help="navigate a registry hive", parents=[common])
    hsub = hive.add_subparsers(dest="hive_command", required=True, parser_class=_Parser)
    p = hsub.add_parser("ls", help="list subkeys and values of a key", parents=[common])
    p.add_argument("hive")
    p.add_argument("key", nargs="?", default="")
    p = hsub.add_parser("get", help="show a value", parents=[common])
    p.add_argument("hive")
    p.add_argument("key")
    p.add_argument("value")
    p = hsub.add_parser("export", help="write a value's data to a file", parents=[common])
    p.add_argument("hive")
    p.add_argument("key")
    p.add_argument("value")
    p.add_argument("-o", "--output", required=True)

    shell = sub.add_parser("shellact", help="shellactivities records", parents=[common])
    ssub = shell.add_subparsers(dest="shellact_command", required=True, parser_class=_Parser)
    p = ssub.add_parser("parse", help="decode a raw blob or the key inside a hive", parents=[common])
    p.add_argument("input")

    p = sub.add_parser("carve", help="scan a raw image", parents=[common])
    p.add_argument("image")
    p.add_argument("--keyword", action="append", dest="keywords", help="repeatable; defaults to the db keywords")

    p = sub.add_parser("memscan", help="triage a memory image", parents=[common])
    p.add_argument("dump")

    p = sub.add_parser("report", help="run the full methodology over a case file", parents=[common])
    p.add_argument("case")
    p.add_argument("-o", "--output", help="write the report here instead of stdout")

    synth = sub.add_parser("synth", help="generate fixtures", parents=[common])
    ysub = synth.add_subparsers(dest="synth_command", required=True, parser_class=_Parser)
    p = ysub.add_parser("blob", help="a shellactivities blob", parents=[common])
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--time", default=REFERENCE_INSTANT)
    p.add_argument("--record", nargs=2, action="append", metavar=("EXE_PATH", "TITLE"), default=None)
    p.add_argument("--encoding", choices=("utf16le", "utf8"), default="utf16le")
    p = ysub.add_parser("hive", help="a hive holding a blob at the shellactivities path", parents=[common])
    p.add_argument("blob")
    p.add_argument("-o", "--output", required=True)
    p = ysub.add_parser("noise", help="a noise image from a plant manifest", parents=[common])
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True)
    p = ysub.add_parser("case", help="a complete synthetic case", parents=[common])
    p.add_argument("outdir")
    p.add_argument("--seed", type=int, default=40187070)
    p.add_argument("--size", type=_positive_int, default=1 << 20)
    return parser


# -- helpers --------------------------------------------------------------------------


def _read(path: str):
    try:
        return open_stream(path)
    except OSError as exc:
        raise InputUnreadable(f"{path}: {exc.strerror or exc}") from exc


def _load_db(args) -> SignatureDb:
    if not args.db:
        return SignatureDb()
    try:
        return SignatureDb.load(args.db)
    except OSError as exc:
        raise ConfigError(f"{args.db}: {exc.strerror or exc}") from exc
    except (InvalidSignatureDb, ValueError) as exc:
        raise ConfigError(f"{args.db}: {exc}") from exc


def _open_hive(path: str) -> HiveFile:
    data = _read(path)
    try:
        return open_hive(bytes(data))
    except HiveError as exc:
        raise InputUnreadable(f"{path}: {exc}") from exc


def _emit(args, payload: dict, human: list[str]) -> None:
    if args.format == "machine":
        text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    else:
        text = "\n".join(human) + "\n"
    sys.stdout.buffer.write(text.encode("utf-8"))
    sys.stdout.flush()


def _hexdump(data: bytes, limit: int = 512) -> list[str]:
    lines = []
    for off in range(0, min(len(data), limit), 16):
        row = data[off : off + 16]
        text = "".join(chr(b) if 0x20 <= b < 0x7F else "." for b in row)
        lines.append(f"  {off:08x}  {row.hex(' '):<47}  {text}")
    if len(data) > limit:
        lines.append(f"  ... {len(data) - limit} more bytes")
    return lines


def _key_dict(k: KeyNode) -> dict:
    return {
        "path": k.path,
        "name": k.name,
        "last_written": k.last_written.isoformat(),
        "subkeys": k.subkey_count,
        "values": k.value_count,
    }


def _key(hive: HiveFile, path: str) -> KeyNode:
    try:
        return hive.get_key(path)
    except HiveError as exc:
        raise InputUnreadable(str(exc)) from exc


# -- commands -------------------------------------------------------------------------


def cmd_hive(args) -> int:
    hive = _open_hive(args.hive)
    key = _key(hive, args.key)
    if args.hive_command == "ls":
        subkeys = hive.list_subkeys(key)
        values = hive.list_values(key)
        payload = {
            "key": _key_dict(key),
            "subkeys": [_key_dict(k) for k in subkeys],
            "values": [{"name": v.name, "type": v.type_name, "length": v.data_length} for v in values],
        }
        human = [f"{key.path or '<root>'}  (last written {key.last_written.isoformat()})"]
        human += [f"  [key]   {k.name}" for k in subkeys]
        human += [f"  [value] {v.name or '(default)'}  {v.type_name}  {v.data_length} bytes" for v in values]
        _emit(args, payload, human)
        return EXIT_OK

    try:
        value = hive.get_value(key, args.value)
        data = hive.read_value_data(value)
    except HiveError as exc:
        raise InputUnreadable(str(exc)) from exc
    if args.hive_command == "export":
        Path(args.output).write_bytes(data)
        _emit(args, {"output": args.output, "length": len(data)}, [f"wrote {len(data)} bytes to {args.output}"])
        return EXIT_OK
    payload = {
        "key": key.path,
        "name": value.name,
        "type": value.type_name,
        "length": len(data),
        "storage": value.data_locator.kind,
        "data_hex": data.hex(),
    }
    human = [f"{key.path}\\{value.name}  {value.type_name}  {len(data)} bytes ({value.data_locator.kind})"]
    _emit(args, payload, human + _hexdump(data))
    return EXIT_OK


def _log_dict(log: ShellActivityLog, where: str) -> dict:
    records = []
    for r in log.records:
        attr = classify_record(r)
        records.append(
            {
                "offset": r.raw_extent[0],
                "exe_path": r.exe_path,
                "exe_name": r.exe_name,
                "page_title": r.page_title,
                "encoding": r.string_encoding,
                "attribution": attr.kind.value,
                "username": attr.username,
                "drive": attr.drive_letter,
                "trailer_hint": trailer_timestamp_hint(r.trailer_a5),
            }
        )
    return {
        "location": where,
        "header_timestamp": log.header_timestamp.isoformat(),
        "header_values_hex": log.header_values_raw.hex(),
        "records": records,
        "warnings": list(log.warnings),
    }


def cmd_shellact(args) -> int:
    db = _load_db(args)
    data = bytes(_read(args.input))
    blobs: list[tuple[str, bytes]] = []
    if data[:4] == b"regf":
        try:
            hive = open_hive(data)
        except HiveError as exc:
            raise InputUnreadable(f"{args.input}: {exc}") from exc
        keys = []
        try:
            keys = [hive.get_key(db.shellactivities_path)]
        except HiveError:
            for path in hive.find_keys_matching("shellactivities"):
                k = hive.get_key(path)
                keys += [k] + hive.list_subkeys(k)
        for k in keys:
            for v in hive.list_values(k):
                try:
                    blobs.append((f"{k.path}\\{v.name}", hive.read_value_data(v)))
                except HiveError as exc:
                    raise InputUnreadable(str(exc)) from exc
        if not blobs:
            raise InputUnreadable(f"{args.input}: no shellactivities data in hive")
    else:
        blobs.append((args.input, data))

    logs = []
    for where, blob in blobs:
        try:
            logs.append(_log_dict(parse_shellactivities(blob), where))
        except ShellActivityError as exc:
            raise InputUnreadable(f"{where}: {type(exc).__name__}: {exc}") from exc

    human = []
    for log in logs:
        human.append(f"{log['location']}: header time {log['header_timestamp']}, {len(log['records'])} record(s)")
        for r in log["records"]:
            who = f" user {r['username']}" if r["username"] else ""
            human.append(f"  @{r['offset']} [{r['attribution']}{who}] {r['page_title']}")
            human.append(f"      {r['exe_path']}")
        human += [f"  warning: {w}" for w in log["warnings"]]
    _emit(args, {"logs": logs}, human)
    return EXIT_OK


def cmd_carve(args) -> int:
    db = _load_db(args)
    data = _read(args.image)
    opts = {"chunk_size": args.chunk_size, "workers": args.workers}
    keywords = args.keywords or db.keywords
    kw = keyword_scan(data, keywords, **opts)
    paths = find_tor_paths(data, db.path_patterns, **opts)
    urls = find_urls(data, URL_PREFIXES, **opts)
    endpoints = find_obfs4_endpoints(data, **opts)
    records = carve_shellactivity_records(data, args.max_record_len, **opts)
    payload = {
        "keywords": [{"offset": h.offset, "encoding": h.encoding, "keyword": h.keyword, "text": h.text} for h in kw],
        "tor_paths": [
            {"offset": h.offset, "encoding": h.encoding, "path": h.path, "attribution": h.attribution.kind.value}
            for h in paths
        ],
        "urls": [{"offset": h.offset, "encoding": h.encoding, "url": h.url} for h in urls],
        "obfs4_endpoints": [
            {"offset": h.offset, "encoding": h.encoding, "address": h.address, "port": h.port,
             "anchor_offset": h.anchor_offset}
            for h in endpoints
        ],
        "records": [
            {"offset": c.source_offset, "complete": c.complete,
             "page_title": c.record.page_title if c.complete else None,
             "exe_path": c.record.exe_path if c.complete else None}
            for c in records
        ],
    }
    human = [f"keyword hits: {len(kw)}"]
    human += [f"  @{h.offset} [{h.encoding}] {h.keyword}" for h in kw]
    human.append(f"Tor paths: {len(paths)}")
    human += [f"  @{h.offset} [{h.encoding}] {h.path} ({h.attribution.kind.value})" for h in paths]
    human.append(f"URLs: {len(urls)}")
    human += [f"  @{h.offset} [{h.encoding}] {h.url}" for h in urls]
    human.append(f"obfs4 endpoints: {len(endpoints)}")
    human += [f"  @{h.offset} [{h.encoding}] {h.address}:{h.port if h.port else '?'}" for h in endpoints]
    human.append(f"shellactivities records: {len(records)}")
    for c in records:
        if c.complete:
            human.append(f"  @{c.source_offset} {c.record.page_title}")
        else:
            human.append(f"  @{c.source_offset} (incomplete)")
    _emit(args, payload, human)
    return EXIT_OK


def cmd_memscan(args) -> int:
    db = _load_db(args)
    data = _read(args.dump)
    found = scan_memory_image(data, db, chunk_size=args.chunk_size, workers=args.workers)
    payload = {
        "verdict": found.verdict.value,
        "process_names": {n: offs for n, offs in found.process_name_hits.items()},
        "tor_paths": [{"offset": h.offset, "encoding": h.encoding, "path": h.path} for h in found.tor_path_hits],
        "notes": found.notes,
    }
    human = [f"verdict: {found.verdict.value}"] + [f"  {n}" for n in found.notes]
    human += [f"  path @{h.offset} [{h.encoding}] {h.path}" for h in found.tor_path_hits]
    _emit(args, payload, human)
    return EXIT_OK


def cmd_report(args) -> int:
    db = _load_db(args)
    try:
        inputs = CaseInputs.load(args.case)
    except OSError as exc:
        raise InputUnreadable(f"{args.case}: {exc.strerror or exc}") from exc
    except InvalidCase as exc:
        raise ConfigError(str(exc)) from exc
    if args.case_id:
        inputs.case_id = args.case_id
    if args.report_time:
        inputs.report_time = args.report_time
    if inputs.report_time:
        try:
            inputs.report_time = parse_instant(inputs.report_time).isoformat()
        except (ValueError, OutOfRange) as exc:
            raise ConfigError(f"bad report time {inputs.report_time!r}: {exc}") from exc
    report = run_methodology(
        inputs, db, chunk_size=args.chunk_size, max_record_len=args.max_record_len, workers=args.workers
    )
    out = render_report(report, args.format)
    if args.output:
        Path(args.output).write_bytes(out)
    else:
        sys.stdout.buffer.write(out)
        sys.stdout.flush()
    return EXIT_OK


def cmd_synth(args) -> int:
    what = args.synth_command
    if what == "blob":
        pairs = args.record or []
        records = [sample_record(path, title, string_encoding=args.encoding) for path, title in pairs]
        data = build_shellactivities_blob(args.time, records)
        Path(args.output).write_bytes(data)
        written = [args.output]
    elif what == "hive":
        db = _load_db(args)
        blob = bytes(_read(args.blob))
        Path(args.output).write_bytes(build_minimal_hive([(db.shellactivities_path, [("Data", REG_BINARY, blob)])]))
        written = [args.output]
    elif what == "noise":
        try:
            manifest = PlantManifest.load(args.manifest)
        except OSError as exc:
            raise InputUnreadable(f"{args.manifest}: {exc.strerror or exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{args.manifest}: bad manifest: {exc}") from exc
        Path(args.output).write_bytes(plant_in_noise(manifest, _load_db(args)))
        written = [args.output]
    else:
        build_case(args.outdir, seed=args.seed, size=args.size)
        written = sorted(str(p) for p in Path(args.outdir).iterdir())
    _emit(args, {"written": written}, [f"wrote {w}" for w in written])
    return EXIT_OK


COMMANDS = {
    "hive": cmd_hive,
    "shellact": cmd_shellact,
    "carve": cmd_carve,
    "memscan": cmd_memscan,
    "report": cmd_report,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InputUnreadable as exc:
        print(f"tbbtrace: input unreadable: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE
    except (ConfigError, SynthError) as exc:
        print(f"tbbtrace: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"tbbtrace: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE


if __name__ == "__main__":
    sys.exit(main())
