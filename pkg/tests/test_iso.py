from __future__ import annotations

import datetime as dt
import json
import struct

import pytest
from hypothesis import given, strategies as st

from carrierforge.errors import ExtractionCollision, IsoError
from carrierforge.forge import BOUNDARY_SIZES, FORGE_EPOCH, Truncate, build_iso, corrupt, forge, ForgeSpec
from carrierforge.classify import CarrierClass
from carrierforge.iso import iso_extract, iso_list, parse_recording_date


def _reference_walk(image: bytes) -> dict[str, bytes | None]:
    """Small independent reader: path -> file bytes (None for directories)."""
    pvd = image[16 * 2048:17 * 2048]
    assert pvd[0] == 1 and pvd[1:6] == b"CD001"
    out = {}

    def records(lba, length):
        data = image[lba * 2048:lba * 2048 + length]
        pos = 0
        while pos < len(data):
            n = data[pos]
            if n == 0:
                pos = (pos // 2048 + 1) * 2048
                continue
            yield data[pos:pos + n]
            pos += n

    def visit(lba, length, prefix):
        for rec in records(lba, length):
            ident = rec[33:33 + rec[32]]
            if ident in (b"\x00", b"\x01"):
                continue
            name = ident.decode("ascii").split(";")[0].rstrip(".")
            path = prefix + name
            ext, size = struct.unpack_from("<I", rec, 2)[0], struct.unpack_from("<I", rec, 10)[0]
            # the big-endian halves must agree
            assert struct.unpack_from(">I", rec, 6)[0] == ext and struct.unpack_from(">I", rec, 14)[0] == size
            if rec[25] & 2:
                out[path] = None
                visit(ext, size, path + "/")
            else:
                out[path] = image[ext * 2048:ext * 2048 + size]

    root = pvd[156:190]
    visit(struct.unpack_from("<I", root, 2)[0], struct.unpack_from("<I", root, 10)[0], "")
    return out


def _files_on_disk(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in root.rglob("*") if p.is_file()}


def test_listing_example():
    image = build_iso({"A.TIF": b"a" * 100, "DIR/B.TXT": b"b" * 7})
    entries = iso_list(image)
    assert [(e.path, e.is_directory, e.data_length) for e in entries if not e.is_directory] == [
        ("A.TIF", False, 100), ("DIR/B.TXT", False, 7)]
    assert len(entries) == 3
    assert [e.path for e in entries if e.is_directory] == ["DIR"]
    assert all(e.version_suffix_stripped for e in entries if not e.is_directory)
    # directories come before their children
    assert [e.path for e in entries].index("DIR") < [e.path for e in entries].index("DIR/B.TXT")


def test_empty_root():
    assert iso_list(build_iso({})) == []


def test_recording_date_to_utc():
    entries = iso_list(build_iso({"A.TIF": b"x"}))
    assert entries[0].recorded_at == FORGE_EPOCH.replace(tzinfo=dt.timezone.utc)
    # 2016-03-01 12:00 at UTC+01:00 (offset 4 quarter hours)
    when, flagged = parse_recording_date(bytes([116, 3, 1, 12, 0, 0, 4]))
    assert when == dt.datetime(2016, 3, 1, 11, 0, tzinfo=dt.timezone.utc) and not flagged
    assert parse_recording_date(bytes(7)) == (None, False)
    assert parse_recording_date(bytes([116, 13, 1, 0, 0, 0, 0])) == (None, True)


def test_truncated_extent_names_entry():
    art = forge(ForgeSpec(CarrierClass.ISO_DATA_DISK, "T", {"A.TIF": 100, "DIR/B.TXT": 5000}))
    entry = next(e for e in iso_list(art.image) if e.path == "DIR/B.TXT")
    cut = corrupt(art, Truncate(entry.extent_lba * 2048 + 100)).image
    with pytest.raises(IsoError, match="DIR/B.TXT"):
        iso_list(cut)


def test_truncated_directory_extent():
    art = forge(ForgeSpec(CarrierClass.ISO_DATA_DISK, "T", {"DIR/B.TXT": 10}))
    d = next(e for e in iso_list(art.image) if e.path == "DIR")
    with pytest.raises(IsoError, match="runs past end"):
        iso_list(corrupt(art, Truncate(d.extent_lba * 2048 + 40)).image)


def test_malformed_record_length_reports_position():
    image = bytearray(build_iso({"A.TIF": b"x"}))
    root_lba = struct.unpack_from("<I", image, 16 * 2048 + 156 + 2)[0]
    # first record after "." and ".." (34 bytes each)
    image[root_lba * 2048 + 68] = 20
    with pytest.raises(IsoError, match=f"LBA {root_lba} offset 68"):
        iso_list(bytes(image))


def test_directory_cycle_detected():
    image = bytearray(build_iso({"DIR/B.TXT": b"x"}))
    root = 16 * 2048 + 156
    root_lba = struct.unpack_from("<I", image, root + 2)[0]
    dir_lba = next(e for e in iso_list(bytes(image)) if e.path == "DIR").extent_lba
    # point DIR's record inside the root at the root extent
    pos = root_lba * 2048 + 68
    struct.pack_into("<I", image, pos + 2, root_lba)
    struct.pack_into(">I", image, pos + 6, root_lba)
    assert dir_lba != root_lba
    with pytest.raises(IsoError, match="cycle"):
        iso_list(bytes(image))


def test_interleaved_and_extended_attributes_rejected():
    base = build_iso({"A.TIF": b"x"})
    root_lba = struct.unpack_from("<I", base, 16 * 2048 + 156 + 2)[0]
    pos = root_lba * 2048 + 68
    for offset, message in ((26, "interleaved"), (1, "extended attribute")):
        image = bytearray(base)
        image[pos + offset] = 1
        with pytest.raises(IsoError, match=message):
            iso_list(bytes(image))


def test_round_trip_boundary_sizes(tmp_path):
    tree = {f"F{n}.BIN": bytes([n % 251]) * n for n in BOUNDARY_SIZES}
    tree.update({"D1/D2/DEEP.TXT": b"deep", "D1/X.DAT": b"x" * 4097, "EMPTYDIR/": b""})
    image = build_iso(tree, "BOUNDS")
    report = iso_extract(image, tmp_path / "out")
    expected = {k: v for k, v in tree.items() if not k.endswith("/")}
    assert _files_on_disk(tmp_path / "out") == expected
    assert (tmp_path / "out" / "EMPTYDIR").is_dir()
    assert report.files_written == len(expected)
    assert report.bytes_written == sum(len(v) for v in expected.values())
    assert report.bytes_written == sum(e.data_length for e in report.entries if not e.is_directory)


def test_reference_reader_agrees_with_listing():
    tree = {"A.TIF": b"a" * 3000, "DIR/B.TXT": b"b", "DIR/SUB/C.DAT": b"", "Z/": b""}
    image = build_iso(tree, "REF", joliet=True, udf_bridge=True)
    ref = _reference_walk(image)
    listed = {e.path: e for e in iso_list(image)}
    assert set(ref) == set(listed)
    for path, data in ref.items():
        assert (data is None) == listed[path].is_directory


def test_joliet_tree_keeps_long_names(tmp_path):
    tree = {"Long Report Name.pdf": b"pdf", "Sub Folder/naïve.txt": b"n"}
    image = build_iso(tree, "JOL", joliet=True)
    assert {e.path for e in iso_list(image, joliet=True)} == {"Long Report Name.pdf", "Sub Folder",
                                                             "Sub Folder/naïve.txt"}
    primary = [e.path for e in iso_list(image)]
    assert all(len(p.split("/")[-1]) <= 12 for p in primary)
    report = iso_extract(image, tmp_path / "j", joliet=True, sidecar=tmp_path / "side.json")
    assert _files_on_disk(tmp_path / "j") == tree
    side = json.loads((tmp_path / "side.json").read_text())
    assert side["tree"] == "joliet" and side["name_policy"] == "verbatim"
    assert side["image_sha256"] == report.image_sha256


def test_collision_refuses_to_overwrite(tmp_path):
    image = build_iso({"A.TIF": b"new", "B.TIF": b"b"})
    dest = tmp_path / "d"
    dest.mkdir()
    (dest / "A.TIF").write_bytes(b"old")
    with pytest.raises(ExtractionCollision, match="A.TIF"):
        iso_extract(image, dest)
    assert (dest / "A.TIF").read_bytes() == b"old"
    assert not (dest / "B.TIF").exists()


def test_zero_length_file(tmp_path):
    report = iso_extract(build_iso({"E.TXT": b""}), tmp_path / "z")
    assert (tmp_path / "z" / "E.TXT").read_bytes() == b""
    assert report.files_written == 1


def test_listing_is_stable():
    image = build_iso({"B.TXT": b"1", "A.TXT": b"2", "C/D.TXT": b"3"})
    assert iso_list(image) == iso_list(image)


_names = st.from_regex(r"[A-Z][A-Z0-9_]{0,7}", fullmatch=True)


@given(st.dictionaries(
    st.tuples(st.lists(_names, max_size=2).map(tuple), _names, st.from_regex(r"[A-Z0-9]{0,3}", fullmatch=True)),
    st.sampled_from(BOUNDARY_SIZES + (5000,)), max_size=6,
))
def test_forged_tree_round_trip(spec):
    tree = {}
    for (dirs, stem, ext), size in spec.items():
        name = f"{stem}.{ext}" if ext else stem
        tree["/".join([*(f"D{d[:7]}" for d in dirs), name])] = bytes([len(name)]) * size
    # skip trees where a file path is also a directory prefix
    paths = set(tree)
    if any(q.startswith(p + "/") for p in paths for q in paths):
        return
    ref = _reference_walk(build_iso(tree))
    assert {k: v for k, v in ref.items() if v is not None} == tree
