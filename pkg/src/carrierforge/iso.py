"""ISO 9660 directory tree listing and file extraction."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .detect import ISO_BLOCK, detect_iso9660, find_primary_descriptor, iter_descriptors
from .errors import ExtractionCollision, IsoError

FLAG_DIRECTORY = 0x02
FLAG_MULTI_EXTENT = 0x80
JOLIET_ESCAPES = (b"%/@", b"%/C", b"%/E")


@dataclass(frozen=True)
class IsoEntry:
    path: str
    is_directory: bool
    extent_lba: int
    data_length: int
    recorded_at: dt.datetime | None
    version_suffix_stripped: bool = False
    # 7-byte recording date as hex, kept verbatim
    raw_timestamp: str = ""
    timestamp_flagged: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recorded_at"] = self.recorded_at.isoformat() if self.recorded_at else None
        return d


@dataclass
class ExtractionReport:
    files_written: int
    bytes_written: int
    entries: list[IsoEntry] = field(default_factory=list)
    image_sha256: str = ""
    sidecar_path: Path | None = None

    def sidecar(self, *, volume_id: str = "", joliet: bool = False) -> dict:
        return {
            "image_sha256": self.image_sha256,
            "volume_id": volume_id,
            "tree": "joliet" if joliet else "primary",
            "name_policy": "verbatim",
            "files_written": self.files_written,
            "bytes_written": self.bytes_written,
            "entries": [e.to_dict() for e in self.entries],
        }


def parse_recording_date(raw: bytes) -> tuple[dt.datetime | None, bool]:
    """Decode a 7-byte directory record date to UTC.

    Returns ``(timestamp, flagged)``. All-zero means "not recorded" and is
    not flagged; impossible field values give ``(None, True)``.
    """
    if raw == b"\x00" * 7:
        return None, False
    year, month, day, hour, minute, second = raw[:6]
    offset = struct.unpack("b", raw[6:7])[0]
    if not -48 <= offset <= 52:
        return None, True
    try:
        local = dt.datetime(1900 + year, month, day, hour, minute, second,
                            tzinfo=dt.timezone(dt.timedelta(minutes=15 * offset)))
    except ValueError:
        return None, True
    return local.astimezone(dt.timezone.utc), False


def _select_descriptor(image, joliet: bool) -> tuple[bytes, bool]:
    if joliet:
        for _, block in iter_descriptors(image):
            if block[1:6] != b"CD001" or block[0] == 255:
                break
            if block[0] == 2 and block[88:91] in JOLIET_ESCAPES:
                return block, True
    pvd = find_primary_descriptor(image)
    if pvd is None:
        raise IsoError("no ISO 9660 primary volume descriptor")
    return pvd, False


def _decode_name(ident: bytes, ucs2: bool) -> tuple[str, bool]:
    if ucs2:
        name = ident.decode("utf-16-be", "replace")
    else:
        name = ident.decode("ascii", "replace")
    stripped = False
    if ";" in name:
        name, _, version = name.rpartition(";")
        stripped = version.isdigit()
        if not stripped:
            name = f"{name};{version}"
    if name.endswith(".") and len(name) > 1:
        name = name[:-1]
    return name, stripped


def _read_directory(image, lba: int, length: int, block_size: int, where: str) -> list[dict]:
    start = lba * block_size
    if start + length > len(image):
        raise IsoError(
            f"directory {where or '/'} extent (LBA {lba}, {length} bytes) runs past end of image"
        )
    data = bytes(image[start:start + length])
    records = []
    pos = 0
    while pos < length:
        rec_len = data[pos]
        if rec_len == 0:
            # records never straddle a block; zero means skip to the next block
            pos = (pos // block_size + 1) * block_size
            continue
        offset_in_dir = pos
        if rec_len < 34 or pos + rec_len > length:
            raise IsoError(
                f"malformed directory record length {rec_len} at LBA {lba} offset {offset_in_dir}"
            )
        rec = data[pos:pos + rec_len]
        name_len = rec[32]
        if 33 + name_len > rec_len:
            raise IsoError(
                f"malformed directory record (name length {name_len}) at LBA {lba} offset {offset_in_dir}"
            )
        records.append({
            "ext_attr_len": rec[1],
            "extent": struct.unpack_from("<I", rec, 2)[0],
            "length": struct.unpack_from("<I", rec, 10)[0],
            "date": rec[18:25],
            "flags": rec[25],
            "unit_size": rec[26],
            "gap": rec[27],
            "ident": rec[33:33 + name_len],
            "lba": lba,
            "offset": offset_in_dir,
        })
        pos += rec_len
    return records


def _walk(image, root_record: bytes, block_size: int, ucs2: bool, max_depth: int | None) -> list[IsoEntry]:
    root_lba = struct.unpack_from("<I", root_record, 2)[0]
    root_len = struct.unpack_from("<I", root_record, 10)[0]
    visited: set[int] = set()
    entries: list[IsoEntry] = []

    def visit(lba: int, length: int, prefix: str, depth: int) -> None:
        if lba in visited:
            raise IsoError(f"directory cycle: extent LBA {lba} revisited at {prefix or '/'}")
        visited.add(lba)
        for rec in _read_directory(image, lba, length, block_size, prefix):
            if rec["ident"] in (b"\x00", b"\x01"):
                continue
            name, stripped = _decode_name(rec["ident"], ucs2)
            where = f"LBA {rec['lba']} offset {rec['offset']}"
            path = f"{prefix}/{name}" if prefix else name
            if not name or name in (".", "..") or "/" in name or "\\" in name:
                raise IsoError(f"unsafe file identifier {name!r} at {where}")
            if rec["ext_attr_len"]:
                raise IsoError(f"{path}: extended attribute record present ({where})")
            if rec["unit_size"] or rec["gap"]:
                raise IsoError(f"{path}: interleaved file ({where})")
            if rec["flags"] & FLAG_MULTI_EXTENT:
                raise IsoError(f"{path}: multi-extent file not supported ({where})")
            is_dir = bool(rec["flags"] & FLAG_DIRECTORY)
            if not is_dir and rec["extent"] * block_size + rec["length"] > len(image):
                raise IsoError(
                    f"{path}: extent (LBA {rec['extent']}, {rec['length']} bytes) runs past end of image"
                )
            when, flagged = parse_recording_date(rec["date"])
            entries.append(IsoEntry(
                path, is_dir, rec["extent"], rec["length"], when, stripped,
                rec["date"].hex(), flagged,
            ))
            if is_dir and (max_depth is None or depth + 1 < max_depth):
                visit(rec["extent"], rec["length"], path, depth + 1)

    visit(root_lba, root_len, "", 0)
    return entries


def iso_list(image, *, joliet: bool = False, max_depth: int | None = None) -> list[IsoEntry]:
    """List every entry depth-first, each directory before its children.

    With ``joliet=True`` the Joliet supplementary tree is walked when the
    image has one, otherwise the primary tree. ``max_depth=1`` lists only
    the root directory.
    """
    descriptor, ucs2 = _select_descriptor(image, joliet)
    block_size = struct.unpack_from("<H", descriptor, 128)[0] or ISO_BLOCK
    return _walk(image, descriptor[156:190], block_size, ucs2, max_depth)


def iso_block_size(image) -> int:
    pvd = find_primary_descriptor(image)
    if pvd is None:
        raise IsoError("no ISO 9660 primary volume descriptor")
    return struct.unpack_from("<H", pvd, 128)[0] or ISO_BLOCK


def iso_extract(image, destination, *, joliet: bool = False, sidecar=None) -> ExtractionReport:
    """Write every file of the image under ``destination``.

    Existing files are never overwritten: all targets are checked before
    anything is written and any clash raises :class:`ExtractionCollision`.
    When ``sidecar`` is given a JSON record of the listing is written there.
    """
    destination = Path(destination)
    entries = iso_list(image, joliet=joliet)
    block_size = iso_block_size(image)

    clashes = []
    for e in entries:
        target = destination.joinpath(*e.path.split("/"))
        if e.is_directory:
            if target.exists() and not target.is_dir():
                clashes.append(e.path)
        elif target.exists() or target.is_symlink():
            clashes.append(e.path)
    if clashes:
        raise ExtractionCollision(f"refusing to overwrite in {destination}: {', '.join(clashes)}")

    files = bytes_written = 0
    destination.mkdir(parents=True, exist_ok=True)
    for e in entries:
        target = destination.joinpath(*e.path.split("/"))
        if e.is_directory:
            target.mkdir(parents=True, exist_ok=True)
            continue
        target.parent.mkdir(parents=True, exist_ok=True)
        start = e.extent_lba * block_size
        with open(target, "xb") as fh:
            fh.write(image[start:start + e.data_length])
        if e.recorded_at is not None:
            stamp = e.recorded_at.timestamp()
            os.utime(target, (stamp, stamp))
        files += 1
        bytes_written += e.data_length

    report = ExtractionReport(files, bytes_written, entries, hashlib.sha256(image).hexdigest())
    if sidecar is not None:
        info = detect_iso9660(image)
        _, used_joliet = _select_descriptor(image, joliet)
        sidecar = Path(sidecar)
        sidecar.parent.mkdir(parents=True, exist_ok=True)
        sidecar.write_text(
            json.dumps(report.sidecar(volume_id=info.volume_id if info else "", joliet=used_joliet),
                       indent=2) + "\n",
            encoding="utf-8",
        )
        report.sidecar_path = sidecar
    return report
