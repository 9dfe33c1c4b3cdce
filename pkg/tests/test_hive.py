import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbbtrace.hive import (
    REG_BINARY,
    REG_DWORD,
    REG_SZ,
    KeyNotFound,
    MalformedHive,
    TruncatedHive,
    base_block_checksum,
    open_hive,
)
from tbbtrace.shellact import SHELLACTIVITIES_PATH
from tbbtrace.synth import build_minimal_hive


@pytest.fixture
def minimal():
    return build_minimal_hive([("Software", [])])


@pytest.fixture
def shell_hive():
    return build_minimal_hive(
        [
            (SHELLACTIVITIES_PATH, [("Data", REG_BINARY, b"\x02\x00\x00\x00" + bytes(20))]),
            ("Software\\Classes", []),
        ]
    )


def test_too_small():
    with pytest.raises(MalformedHive):
        open_hive(bytes(100))


def test_bad_magic(minimal):
    broken = b"\x00" + minimal[1:]
    with pytest.raises(MalformedHive):
        open_hive(broken)


def test_minimal_root(minimal):
    hive = open_hive(minimal)
    root = hive.root()
    assert root.path == ""
    assert [k.name for k in hive.list_subkeys(root)] == ["Software"]
    assert hive.checksum_ok


def test_checksum_mismatch_is_recorded_not_fatal(minimal):
    image = bytearray(minimal)
    image[508] ^= 0xFF
    hive = open_hive(bytes(image))
    assert not hive.checksum_ok
    assert base_block_checksum(minimal[:512]) == struct.unpack_from("<I", minimal, 508)[0]


def test_truncated_bins(minimal):
    with pytest.raises(TruncatedHive):
        open_hive(minimal[:-100])


def test_empty_entries_bare_root():
    hive = open_hive(build_minimal_hive([]))
    assert hive.list_subkeys(hive.root()) == []
    assert hive.list_values(hive.root()) == []


def test_get_key_full_path(shell_hive):
    hive = open_hive(shell_hive)
    key = hive.get_key(SHELLACTIVITIES_PATH)
    assert key.name == "Current"
    assert key.path == SHELLACTIVITIES_PATH
    assert hive.get_key(SHELLACTIVITIES_PATH.upper()).cell_offset == key.cell_offset


def test_get_key_root_and_missing(minimal):
    hive = open_hive(minimal)
    assert hive.get_key("") == hive.root()
    with pytest.raises(KeyNotFound):
        hive.get_key("No\\Such\\Key")


def test_leaf_has_no_subkeys(minimal):
    hive = open_hive(minimal)
    assert hive.list_subkeys(hive.get_key("Software")) == []


@pytest.mark.parametrize("leaf_kind", ["lh", "lf", "li"])
def test_children_match_insertion(leaf_kind):
    names = ["Zeta", "alpha", "Mid"]
    hive = open_hive(build_minimal_hive([(f"Top\\{n}", []) for n in names], leaf_kind=leaf_kind))
    got = [k.name for k in hive.list_subkeys(hive.get_key("Top"))]
    assert sorted(got) == sorted(names)


def test_index_root_many_children():
    names = [f"k{i:04d}" for i in range(40)]
    hive = open_hive(build_minimal_hive([(f"Top\\{n}", []) for n in names], max_leaf=7))
    assert [k.name for k in hive.list_subkeys(hive.get_key("Top"))] == names
    assert hive.get_key("Top\\k0033").name == "k0033"


def test_value_data_kinds():
    big = bytes(range(256)) * 256  # 64 KiB
    image = build_minimal_hive(
        [("K", [("big", REG_BINARY, big), ("empty", REG_BINARY, b""), ("dw", REG_DWORD, b"\x01\x02\x03\x04"),
                ("sz", REG_SZ, "hi".encode("utf-16-le"))])]
    )
    hive = open_hive(image)
    key = hive.get_key("K")
    values = {v.name: v for v in hive.list_values(key)}
    assert values["big"].data_locator.kind == "bigdata"
    assert hive.read_value_data(values["big"]) == big
    assert hive.read_value_data(values["empty"]) == b""
    assert values["dw"].data_locator.kind == "inline"
    assert hive.read_value_data(values["dw"]) == b"\x01\x02\x03\x04"
    assert hive.read_value_data(values["sz"]) == "hi".encode("utf-16-le")
    assert values["sz"].type_name == "REG_SZ"


def test_big_data_needs_minor_4():
    blob = b"x" * 20000
    hive = open_hive(build_minimal_hive([("K", [("v", REG_BINARY, blob)])], minor_version=3))
    value = hive.get_value(hive.get_key("K"), "v")
    assert value.data_locator.kind == "cell"
    assert hive.read_value_data(value) == blob


def test_value_past_end_is_truncated():
    image = bytearray(build_minimal_hive([("K", [("v", REG_BINARY, b"y" * 100)])]))
    hive = open_hive(bytes(image))
    value = hive.get_value(hive.get_key("K"), "v")
    # Claim more data than the cell holds.
    struct.pack_into("<I", image, 4096 + value.cell_offset + 4 + 4, 5000)
    hive = open_hive(bytes(image))
    with pytest.raises(TruncatedHive):
        hive.read_value_data(hive.get_value(hive.get_key("K"), "v"))


def test_get_value_missing(minimal):
    hive = open_hive(minimal)
    with pytest.raises(KeyNotFound):
        hive.get_value(hive.root(), "nope")


def test_find_keys_matching(shell_hive):
    hive = open_hive(shell_hive)
    assert hive.find_keys_matching("shellactivities") == [SHELLACTIVITIES_PATH.rsplit("\\", 1)[0]]
    assert hive.find_keys_matching("zzz-absent") == []
    everything = hive.find_keys_matching("")
    assert SHELLACTIVITIES_PATH in everything
    assert "Software\\Classes" in everything
    assert len(everything) == len(set(everything)) == len(list(hive.walk())) - 1


_names = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJ0123456789 _-$.", min_size=1, max_size=20)


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.lists(_names, min_size=1, max_size=3).map(lambda parts: "\\".join(parts)),
        st.lists(st.tuples(_names, st.binary(max_size=20000)), max_size=3, unique_by=lambda t: t[0].upper()),
        max_size=6,
    ).filter(lambda d: len({k.upper() for k in d}) == len(d)),
    st.sampled_from(["lh", "lf", "li"]),
)
def test_build_then_read(entries, leaf_kind):
    image = build_minimal_hive([(p, [(n, REG_BINARY, d) for n, d in vals]) for p, vals in entries.items()],
                               leaf_kind=leaf_kind)
    hive = open_hive(image)
    for path, vals in entries.items():
        key = hive.get_key(path)
        for name, data in vals:
            assert hive.read_value_data(hive.get_value(key, name)) == data


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 8191), st.integers(0, 255))
def test_corruption_never_crashes(pos, byte):
    image = bytearray(build_minimal_hive([(SHELLACTIVITIES_PATH, [("Data", REG_BINARY, b"abc" * 100)])]))
    pos %= len(image)
    image[pos] = byte
    try:
        hive = open_hive(bytes(image))
        errors = []
        for key in hive.walk(errors):
            for value in hive.list_values(key):
                hive.read_value_data(value)
    except (MalformedHive, TruncatedHive) as exc:
        assert str(exc)
    except Exception as exc:  # noqa: BLE001
        from tbbtrace.hive import HiveError

        assert isinstance(exc, HiveError), repr(exc)
