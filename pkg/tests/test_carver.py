import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbbtrace.carver import (
    carve_shellactivity_records,
    find_obfs4_endpoints,
    find_tor_paths,
    find_urls,
    keyword_scan,
    open_stream,
)
from tbbtrace.shellact import BrowserKind
from tbbtrace.synth import (
    PORTABLE_PATH,
    SOUNDCLOUD_URL,
    STANDARD_PATH,
    Plant,
    PlantManifest,
    encode_plant_text,
    encode_record,
    sample_record,
    plant_in_noise,
    random_record,
    scatter_plants,
)

MiB = 1 << 20


def noise_with(plants, length=MiB, seed=7):
    return plant_in_noise(PlantManifest(seed, length, [Plant(o, k, p, e) for o, k, p, e in plants]))


def u16(s):
    return encode_plant_text(s, "utf16le")


def test_ascii_keyword_at_known_offset():
    hits = keyword_scan(noise_with([(4096, "kw", b"obfs4", "ascii")]), ["obfs4"])
    assert [(h.offset, h.encoding, h.text) for h in hits] == [(4096, "ascii", "obfs4")]


def test_utf16_keyword_at_known_offset():
    hits = keyword_scan(noise_with([(9000, "kw", u16("Tor Browser"), "utf16le")]), ["Tor Browser"])
    assert [(h.offset, h.encoding) for h in hits] == [(9000, "utf16le")]
    assert hits[0].length == 22


def test_keyword_case_insensitive_and_context():
    data = b"xx" + b"TOR browser" + b"yy"
    hit = keyword_scan(data, ["Tor Browser"], ["ascii"], context=2)[0]
    assert hit.text == "TOR browser"
    assert hit.context == "xxTOR browseryy"


def test_empty_keywords_and_stream():
    assert keyword_scan(b"obfs4", []) == []
    assert keyword_scan(b"", ["obfs4"]) == []


def test_unknown_encoding():
    with pytest.raises(ValueError):
        keyword_scan(b"x", ["x"], ["ebcdic"])


def test_pure_noise_is_silent():
    data = noise_with([])
    assert keyword_scan(data, ["Tor Browser", "obfs4", "firefox.exe", "tor.exe", "obfs4proxy.exe"]) == []
    assert carve_shellactivity_records(data) == []
    assert find_tor_paths(data) == []


def test_open_stream(tmp_path):
    (tmp_path / "a").write_bytes(b"abc obfs4")
    (tmp_path / "empty").write_bytes(b"")
    assert keyword_scan(open_stream(tmp_path / "a"), ["obfs4"])[0].offset == 4
    assert len(open_stream(tmp_path / "empty")) == 0


def test_carve_exact_offsets():
    rng = random.Random(3)
    recs = [random_record(rng) for _ in range(20)]
    manifest = scatter_plants(11, 2 * MiB, [("record", encode_record(r), "binary") for r in recs])
    data = plant_in_noise(manifest)
    carved = carve_shellactivity_records(data)
    assert [c.source_offset for c in carved] == [p.offset for p in manifest.plants]
    assert all(c.complete for c in carved)
    assert [c.record for c in carved] == recs


def test_carve_incomplete():
    raw = encode_record(sample_record())
    data = bytes(100) + raw[:-4] + bytes(5000)
    carved = carve_shellactivity_records(data, max_record_len=2048)
    assert len(carved) == 1
    assert not carved[0].complete
    assert carved[0].source_offset == 100
    assert len(carved[0].raw) == 2048


def test_carve_zero_stream():
    assert carve_shellactivity_records(bytes(4096)) == []


def test_carve_adjacent_records():
    raw = encode_record(sample_record())
    data = raw + raw + b"\xd2\x14" + bytes(100)
    carved = carve_shellactivity_records(data)
    assert [(c.source_offset, c.complete) for c in carved] == [(0, True), (len(raw), True), (2 * len(raw), False)]


def test_tor_paths_both_kinds():
    data = noise_with([(1000, "path", u16(STANDARD_PATH) + b"\0\0", "utf16le"),
                       (5000, "path", PORTABLE_PATH.encode() + b"\0", "ascii"),
                       (9000, "path", u16(PORTABLE_PATH) + b"\0\0", "utf16le")])
    hits = find_tor_paths(data)
    assert [(h.offset, h.encoding, h.path) for h in hits] == [
        (1000, "utf16le", STANDARD_PATH),
        (5000, "ascii", PORTABLE_PATH),
        (9000, "utf16le", PORTABLE_PATH),
    ]
    assert hits[0].attribution.kind is BrowserKind.TOR_STANDARD
    assert hits[0].attribution.username == "40187070"
    assert hits[2].attribution.kind is BrowserKind.TOR_PORTABLE
    assert hits[2].attribution.drive_letter == "E"


def test_tor_path_ends_at_exe():
    data = b"junk" + u16(STANDARD_PATH) + u16("trailing words")
    assert find_tor_paths(data)[0].path == STANDARD_PATH


def test_no_tor_paths():
    assert find_tor_paths(b"C:\\Program Files\\Mozilla Firefox\\firefox.exe") == []


def test_obfs4_endpoint():
    data = noise_with([(2000, "bridge", b"obfs4 192.0.2.7:443\0", "ascii")])
    hits = find_obfs4_endpoints(data)
    assert [(h.offset, h.address, h.port) for h in hits] == [(2006, "192.0.2.7", 443)]
    assert hits[0].anchor_offset == 2000


def test_obfs4_endpoint_utf16():
    data = b"\0" * 10 + u16("Bridge obfs4 10.1.2.3:9001 cert=abc") + b"\0" * 10
    hit = find_obfs4_endpoints(data)[0]
    assert (hit.encoding, hit.address, hit.port) == ("utf16le", "10.1.2.3", 9001)


def test_obfs4_endpoint_outside_window():
    data = b"obfs4" + b" " * 300 + b"192.0.2.7:443"
    assert find_obfs4_endpoints(data, window=256) == []
    assert len(find_obfs4_endpoints(data, window=320)) == 1


def test_no_obfs4():
    assert find_obfs4_endpoints(b"192.0.2.7:443") == []


def test_obfs4_bad_octet_and_port():
    assert find_obfs4_endpoints(b"obfs4 300.1.1.1:80") == []
    hit = find_obfs4_endpoints(b"obfs4 1.2.3.4:99999")[0]
    assert hit.port is None
    assert hit.text == "1.2.3.4"


def test_urls():
    data = noise_with([(3000, "url", SOUNDCLOUD_URL.encode() + b"\0", "ascii"),
                       (7000, "url", u16(SOUNDCLOUD_URL) + b"\0\0", "utf16le")])
    hits = find_urls(data)
    assert [(h.offset, h.encoding, h.url) for h in hits] == [
        (3000, "ascii", SOUNDCLOUD_URL),
        (7000, "utf16le", SOUNDCLOUD_URL),
    ]


def test_url_needs_a_body():
    assert find_urls(b"see http:// now") == []
    assert find_urls(b"") == []


def _all_scans(data, **kw):
    return (
        keyword_scan(data, ["obfs4", "Tor Browser"], **kw),
        find_tor_paths(data, **kw),
        find_urls(data, **kw),
        find_obfs4_endpoints(data, **kw),
        carve_shellactivity_records(data, 4096, **kw),
    )


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([4096, 5000, 65536]), st.integers(1, 3))
def test_chunking_matches_single_pass(seed, chunk, workers):
    rng = random.Random(seed)
    payloads = [("record", encode_record(random_record(rng, max_len=200)), "binary") for _ in range(6)]
    payloads += [("path", u16(STANDARD_PATH), "utf16le"), ("bridge", b"obfs4 192.0.2.9:80", "ascii"),
                 ("url", SOUNDCLOUD_URL.encode(), "ascii")]
    rng.shuffle(payloads)
    data = plant_in_noise(scatter_plants(seed, 64 * 1024, payloads))
    assert _all_scans(data) == _all_scans(data, chunk_size=chunk, workers=workers)


def test_overlap_too_small():
    with pytest.raises(ValueError):
        keyword_scan(b"x" * 100, ["obfs4"], chunk_size=10, overlap=1)
