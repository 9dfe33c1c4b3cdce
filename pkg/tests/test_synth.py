import json

import pytest

from tbbtrace.carver import keyword_scan
from tbbtrace.sigdb import SignatureDb
from tbbtrace.synth import (
    DelimiterCollision,
    OverlapError,
    Plant,
    PlantManifest,
    build_case,
    build_shellactivities_blob,
    encode_record,
    sample_record,
    plant_in_noise,
    scatter_plants,
)


def test_delimiter_collision():
    with pytest.raises(DelimiterCollision):
        encode_record(sample_record(title="\u14d2"))  # encodes to D2 14 in UTF-16LE
    with pytest.raises(DelimiterCollision):
        build_shellactivities_blob(0, [sample_record(title="ok\u50ca\x00")])


def test_overlap_rejected():
    m = PlantManifest(1, 1000, [Plant(10, "a", b"12345"), Plant(12, "b", b"xx")])
    with pytest.raises(OverlapError):
        plant_in_noise(m)


def test_out_of_bounds_rejected():
    with pytest.raises(OverlapError):
        plant_in_noise(PlantManifest(1, 100, [Plant(98, "a", b"12345")]))


def test_deterministic_and_seeded():
    m = PlantManifest(42, 1 << 16, [Plant(4096, "kw", b"obfs4")])
    a, b = plant_in_noise(m), plant_in_noise(m)
    assert a == b
    assert a != plant_in_noise(PlantManifest(43, 1 << 16, m.plants))
    assert a[4096:4101] == b"obfs4"
    assert [h.offset for h in keyword_scan(a, ["obfs4"])] == [4096]


def test_noise_avoids_custom_signatures():
    db = SignatureDb(keywords=["zz"])
    data = plant_in_noise(PlantManifest(9, 1 << 16, []), db)
    assert b"zz" not in data.lower()
    assert "zz".encode("utf-16-le") not in data.lower()


def test_manifest_round_trip(tmp_path):
    m = scatter_plants(5, 4096, [("a", b"abc", "ascii"), ("b", b"\x00\xff", "binary")])
    m.dump(tmp_path / "m.json")
    assert PlantManifest.load(tmp_path / "m.json") == m
    assert json.loads((tmp_path / "m.json").read_text())["plants"][1]["payload_hex"] == "00ff"


def test_scatter_too_large():
    with pytest.raises(OverlapError):
        scatter_plants(1, 100, [("a", b"x" * 90, "ascii")])


def test_build_case_is_reproducible(tmp_path):
    build_case(tmp_path / "a", size=1 << 16)
    build_case(tmp_path / "b", size=1 << 16)
    for name in ("NTUSER.DAT", "memory.raw", "unallocated.bin", "case.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
