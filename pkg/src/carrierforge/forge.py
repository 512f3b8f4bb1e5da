"""Deterministic synthetic carriers for tests.

Every forged artifact carries its own ground truth (class, file tree,
track payloads) so parsers and the pipeline can be checked by round trip.

Pseudo-random payloads use ``sha256-ctr``: block *i* of the stream for
``(seed, label)`` is ``SHA-256(f"{seed}:{label}:{i}")``, concatenated and
cut to length. The output is identical on every platform.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

from .classify import CarrierClass
from .detect import ISO_BLOCK, MDS_SIGNATURE, detect_hfsplus, detect_iso9660, detect_mds
from .errors import ForgeError
from .sectors import (
    CueSheet, SectorMode, TrackDescriptor, format_cue, frame_track, wrap_wav,
)

PAYLOAD_ALGORITHM = "sha256-ctr"
DEFAULT_MAX_IMAGE = 64 * 1024 * 1024
FORGE_EPOCH = dt.datetime(2015, 6, 1, 12, 0, 0)

_DCHARS = re.compile(r"[A-Z0-9_]+")
_DATA_KINDS = {CarrierClass.ISO_DATA_DISK, CarrierClass.UDF_DATA_DISK, CarrierClass.DVD_VIDEO}
_TRACK_KINDS = {CarrierClass.RED_BOOK_AUDIO, CarrierClass.MIXED_MODE, CarrierClass.MALFORMED_AUDIO_WAV}
_BLOB_KINDS = {CarrierClass.HFS_PLUS, CarrierClass.MDS_OPAQUE, CarrierClass.UNKNOWN}


def payload_bytes(seed: int, label: str, size: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(f"{seed}:{label}:{counter}".encode()).digest()
        counter += 1
    return bytes(out[:size])


# ---------------------------------------------------------------------------
# ISO 9660 writer (test images only)


def _both16(v: int) -> bytes:
    return struct.pack("<H", v) + struct.pack(">H", v)


def _both32(v: int) -> bytes:
    return struct.pack("<I", v) + struct.pack(">I", v)


def _dir_date(when: dt.datetime) -> bytes:
    return bytes([when.year - 1900, when.month, when.day, when.hour, when.minute, when.second, 0])


def _vol_date(when: dt.datetime | None) -> bytes:
    if when is None:
        return b"0" * 16 + b"\x00"
    return when.strftime("%Y%m%d%H%M%S").encode() + b"00\x00"


def _record_len(ident_len: int) -> int:
    n = 33 + ident_len
    return n + (n & 1)


def _dir_record(ident: bytes, lba: int, size: int, is_dir: bool, when: dt.datetime) -> bytes:
    body = (
        b"\x00" + _both32(lba) + _both32(size) + _dir_date(when)
        + bytes([0x02 if is_dir else 0x00, 0, 0]) + _both16(1)
        + bytes([len(ident)]) + ident
    )
    rec = bytes([_record_len(len(ident))]) + body
    return rec + b"\x00" * (_record_len(len(ident)) - len(rec))


def _pad_text(text: str, size: int) -> bytes:
    return text.encode("ascii")[:size].ljust(size, b" ")


def _pad_ucs2(text: str, size: int) -> bytes:
    raw = text.encode("utf-16-be")[: size - size % 2]
    return raw + b"\x00 " * ((size - len(raw)) // 2) + b" " * ((size - len(raw)) % 2)


@dataclass
class _Node:
    name: str  # name as given in the tree (used for Joliet)
    iso_name: str = ""
    data: bytes | None = None  # None for directories
    children: dict[str, _Node] = field(default_factory=dict)
    lba: int = 0
    # per tree ("primary"/"joliet") directory extent placement
    dir_lba: dict[str, int] = field(default_factory=dict)
    dir_size: dict[str, int] = field(default_factory=dict)
    number: dict[str, int] = field(default_factory=dict)

    @property
    def is_dir(self) -> bool:
        return self.data is None


def _is_83(name: str, is_dir: bool) -> bool:
    if is_dir:
        return len(name) <= 8 and bool(_DCHARS.fullmatch(name))
    base, dot, ext = name.partition(".")
    return (
        1 <= len(base) <= 8 and bool(_DCHARS.fullmatch(base))
        and len(ext) <= 3 and (not ext or bool(_DCHARS.fullmatch(ext)))
        and "." not in ext
    )


def _mangle(name: str, is_dir: bool, used: set[str]) -> str:
    clean = re.sub(r"[^A-Z0-9_.]", "_", name.upper())
    base, _, ext = clean.rpartition(".") if "." in clean and not is_dir else (clean, "", "")
    base = base.replace(".", "_") or "_"
    ext = ext[:3]
    n = 0
    while True:
        stem = base[:8] if n == 0 else f"{base[:8 - len(str(n)) - 1]}~{n}"
        candidate = f"{stem}.{ext}" if ext else stem
        if candidate not in used:
            return candidate
        n += 1


def _build_tree(tree: Mapping[str, bytes], joliet: bool) -> _Node:
    root = _Node("")
    for key in sorted(tree):
        is_empty_dir = key.endswith("/")
        parts = [p for p in key.strip("/").split("/") if p]
        if not parts:
            raise ForgeError(f"empty path in tree: {key!r}")
        node = root
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            is_dir = not last or is_empty_dir
            if part in (".", "..") or "\\" in part:
                raise ForgeError(f"unsafe path component {part!r}")
            if joliet:
                if len(part) > 64 or any(ord(c) > 0xFFFF for c in part):
                    raise ForgeError(f"{part!r} not representable as a Joliet name")
            elif not _is_83(part, is_dir):
                raise ForgeError(f"{part!r} is not an 8.3 uppercase ISO 9660 name (set joliet)")
            child = node.children.get(part)
            if child is None:
                child = _Node(part, data=None if is_dir else bytes(tree[key]))
                node.children[part] = child
            elif child.is_dir != is_dir:
                raise ForgeError(f"{key!r} is both a file and a directory")
            node = child

    def assign(node: _Node) -> None:
        used: set[str] = set()
        for child in node.children.values():
            if _is_83(child.name, child.is_dir) and child.name not in used:
                child.iso_name = child.name
            else:
                child.iso_name = _mangle(child.name, child.is_dir, used)
            used.add(child.iso_name)
            if child.is_dir:
                assign(child)

    assign(root)
    return root


def _ident(node: _Node, tree: str) -> bytes:
    if tree == "joliet":
        raw = node.name.encode("utf-16-be")
        return raw if node.is_dir else raw + ";1".encode("utf-16-be")
    if node.is_dir:
        return node.iso_name.encode("ascii")
    name = node.iso_name if "." in node.iso_name else node.iso_name + "."
    return (name + ";1").encode("ascii")


def _sorted_children(node: _Node, tree: str) -> list[_Node]:
    return sorted(node.children.values(), key=lambda c: _ident(c, tree))


def _bfs(root: _Node, tree: str) -> list[tuple[_Node, _Node]]:
    """(directory, parent) pairs in path-table order."""
    order = [(root, root)]
    i = 0
    while i < len(order):
        node = order[i][0]
        for child in _sorted_children(node, tree):
            if child.is_dir:
                order.append((child, node))
        i += 1
    return order


def _dir_extent_size(node: _Node, tree: str) -> int:
    lengths = [_record_len(1), _record_len(1)] + [
        _record_len(len(_ident(c, tree))) for c in _sorted_children(node, tree)
    ]
    used = 0
    for n in lengths:
        if used % ISO_BLOCK + n > ISO_BLOCK:
            used = (used // ISO_BLOCK + 1) * ISO_BLOCK
        used += n
    return -(-used // ISO_BLOCK) * ISO_BLOCK


def _serialize_dir(node: _Node, parent: _Node, tree: str, when: dt.datetime) -> bytes:
    records = [
        _dir_record(b"\x00", node.dir_lba[tree], node.dir_size[tree], True, when),
        _dir_record(b"\x01", parent.dir_lba[tree], parent.dir_size[tree], True, when),
    ]
    for c in _sorted_children(node, tree):
        if c.is_dir:
            records.append(_dir_record(_ident(c, tree), c.dir_lba[tree], c.dir_size[tree], True, when))
        else:
            records.append(_dir_record(_ident(c, tree), c.lba, len(c.data), False, when))
    out = bytearray()
    for rec in records:
        if len(out) % ISO_BLOCK + len(rec) > ISO_BLOCK:
            out += b"\x00" * (ISO_BLOCK - len(out) % ISO_BLOCK)
        out += rec
    out += b"\x00" * (node.dir_size[tree] - len(out))
    return bytes(out)


def _path_table(order, tree: str, big_endian: bool) -> bytes:
    fmt_i, fmt_h = (">I", ">H") if big_endian else ("<I", "<H")
    out = bytearray()
    for i, (node, _) in enumerate(order, start=1):
        node.number[tree] = i
    for node, parent in order:
        ident = b"\x00" if node is parent else _ident(node, tree)
        out += bytes([len(ident), 0]) + struct.pack(fmt_i, node.dir_lba[tree])
        out += struct.pack(fmt_h, parent.number[tree]) + ident
        if len(ident) & 1:
            out += b"\x00"
    return bytes(out)


def _sectors(n_bytes: int) -> int:
    return -(-n_bytes // ISO_BLOCK)


def _volume_descriptor(kind: int, volume_id: str, total: int, pt_size: int, l_lba: int, m_lba: int,
                       root: _Node, tree: str, when: dt.datetime) -> bytes:
    d = bytearray(ISO_BLOCK)
    d[0] = kind
    d[1:6] = b"CD001"
    d[6] = 1
    if tree == "joliet":
        d[8:40] = _pad_ucs2("", 32)
        d[40:72] = _pad_ucs2(volume_id, 32)
        d[88:91] = b"%/E"
    else:
        d[8:40] = _pad_text("", 32)
        d[40:72] = _pad_text(volume_id, 32)
    d[80:88] = _both32(total)
    d[120:124] = _both16(1)
    d[124:128] = _both16(1)
    d[128:132] = _both16(ISO_BLOCK)
    d[132:140] = _both32(pt_size)
    d[140:144] = struct.pack("<I", l_lba)
    d[148:152] = struct.pack(">I", m_lba)
    d[156:190] = _dir_record(b"\x00", root.dir_lba[tree], root.dir_size[tree], True, when)
    pad = _pad_ucs2 if tree == "joliet" else _pad_text
    d[190:318] = pad("", 128)
    d[318:446] = pad("", 128)
    d[446:574] = pad("", 128)
    d[574:702] = pad("CARRIERFORGE", 128)
    d[702:813] = pad("", 111)
    d[813:830] = _vol_date(when)
    d[830:847] = _vol_date(when)
    d[847:864] = _vol_date(None)
    d[864:881] = _vol_date(None)
    d[881] = 1
    return bytes(d)


def build_iso(tree: Mapping[str, bytes], volume_id: str = "CARRIER", *, joliet: bool = False,
              udf_bridge: bool = False, when: dt.datetime = FORGE_EPOCH) -> bytes:
    """Master a small ISO 9660 image holding ``tree`` (path -> bytes).

    Keys ending in ``/`` create empty directories. Both-endian fields and
    L/M path tables are written; with ``udf_bridge`` a BEA01/NSR02/TEA01
    recognition sequence follows the descriptor terminator.
    """
    if not _DCHARS.fullmatch(volume_id) or len(volume_id) > 32:
        raise ForgeError(f"volume id {volume_id!r} must be 1-32 d-characters")
    root = _build_tree(tree, joliet)
    trees = ["primary", "joliet"] if joliet else ["primary"]

    lba = 16 + 1 + (1 if joliet else 0) + 1 + (3 if udf_bridge else 0)
    orders = {t: _bfs(root, t) for t in trees}
    for t in trees:
        for node, _ in orders[t]:
            node.dir_size[t] = _dir_extent_size(node, t)
            node.dir_lba[t] = 0
    # path table size does not depend on LBAs
    pt_sizes = {t: len(_path_table(orders[t], t, False)) for t in trees}
    pt_lba = {}
    for t in trees:
        pt_lba[t] = (lba, lba + _sectors(pt_sizes[t]))
        lba += 2 * _sectors(pt_sizes[t])
    for t in trees:
        for node, _ in orders[t]:
            node.dir_lba[t] = lba
            lba += node.dir_size[t] // ISO_BLOCK
    files = []

    def collect(node: _Node) -> None:
        for c in _sorted_children(node, "primary"):
            if c.is_dir:
                collect(c)
            else:
                files.append(c)

    collect(root)
    for f in files:
        if f.data:
            f.lba = lba
            lba += _sectors(len(f.data))
        else:
            f.lba = 0
    total = lba

    image = bytearray(total * ISO_BLOCK)
    pos = 16
    image[pos * ISO_BLOCK:(pos + 1) * ISO_BLOCK] = _volume_descriptor(
        1, volume_id, total, pt_sizes["primary"], *pt_lba["primary"], root, "primary", when)
    pos += 1
    if joliet:
        image[pos * ISO_BLOCK:(pos + 1) * ISO_BLOCK] = _volume_descriptor(
            2, volume_id, total, pt_sizes["joliet"], *pt_lba["joliet"], root, "joliet", when)
        pos += 1
    image[pos * ISO_BLOCK:pos * ISO_BLOCK + 7] = b"\xffCD001\x01"
    pos += 1
    if udf_bridge:
        for ident in (b"BEA01", b"NSR02", b"TEA01"):
            image[pos * ISO_BLOCK:pos * ISO_BLOCK + 7] = b"\x00" + ident + b"\x01"
            pos += 1
    for t in trees:
        l_lba, m_lba = pt_lba[t]
        for big, where in ((False, l_lba), (True, m_lba)):
            table = _path_table(orders[t], t, big)
            image[where * ISO_BLOCK:where * ISO_BLOCK + len(table)] = table
        for node, parent in orders[t]:
            raw = _serialize_dir(node, parent, t, when)
            image[node.dir_lba[t] * ISO_BLOCK:node.dir_lba[t] * ISO_BLOCK + len(raw)] = raw
    for f in files:
        if f.data:
            image[f.lba * ISO_BLOCK:f.lba * ISO_BLOCK + len(f.data)] = f.data
    return bytes(image)


# ---------------------------------------------------------------------------
# forge specs and artifacts


@dataclass(frozen=True)
class TrackSpec:
    mode: SectorMode
    sectors: int = 5
    # "random" raw bytes, "wav" for a RIFF-wrapped payload, "iso" for the ForgeSpec tree
    content: str = "random"
    pregap: int = 0

    def to_dict(self) -> dict:
        return {"mode": self.mode.name, "sectors": self.sectors, "content": self.content, "pregap": self.pregap}

    @classmethod
    def from_dict(cls, d: Mapping) -> TrackSpec:
        return cls(SectorMode[d["mode"]], d.get("sectors", 5), d.get("content", "random"), d.get("pregap", 0))


@dataclass(frozen=True)
class ForgeSpec:
    kind: CarrierClass
    label: str = "CARRIER"
    # path -> bytes, or path -> int (pseudo-random content of that size)
    tree: Mapping[str, bytes | int] | None = None
    tracks: tuple[TrackSpec, ...] | None = None
    volume_id: str = "CARRIER"
    seed: int = 0
    joliet: bool = False
    multi_file: bool = False
    hfsx: bool = False
    blob_size: int = 8192
    max_image_bytes: int = DEFAULT_MAX_IMAGE

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "label": self.label, "volume_id": self.volume_id, "seed": self.seed}
        if self.tree is not None:
            d["tree"] = {
                k: (v if isinstance(v, int) else {"hex": bytes(v).hex()}) for k, v in self.tree.items()
            }
        if self.tracks is not None:
            d["tracks"] = [t.to_dict() for t in self.tracks]
        for name in ("joliet", "multi_file", "hfsx"):
            if getattr(self, name):
                d[name] = True
        if self.kind in _BLOB_KINDS:
            d["blob_size"] = self.blob_size
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ForgeSpec:
        tree = None
        if "tree" in d:
            tree = {}
            for k, v in d["tree"].items():
                if isinstance(v, int):
                    tree[k] = v
                elif "hex" in v:
                    tree[k] = bytes.fromhex(v["hex"])
                else:
                    tree[k] = v["text"].encode("utf-8")
        tracks = tuple(TrackSpec.from_dict(t) for t in d["tracks"]) if "tracks" in d else None
        return cls(
            CarrierClass(d["kind"]), d.get("label", "CARRIER"), tree, tracks,
            d.get("volume_id", "CARRIER"), d.get("seed", 0), d.get("joliet", False),
            d.get("multi_file", False), d.get("hfsx", False), d.get("blob_size", 8192),
        )


@dataclass(frozen=True)
class BitFlip:
    offset: int
    bit: int = 0


@dataclass(frozen=True)
class Truncate:
    length: int


@dataclass(frozen=True)
class ZeroSector:
    index: int
    sector_size: int = ISO_BLOCK


@dataclass(frozen=True)
class ForgedCarrier:
    spec: ForgeSpec
    image_name: str
    # every image file, including the primary one (several for multi-file cues)
    files: Mapping[str, bytes]
    cue_name: str | None = None
    cue_text: str | None = None
    cue: CueSheet | None = None
    tree: Mapping[str, bytes] = field(default_factory=dict)
    track_payloads: tuple[bytes, ...] = ()
    truth: Mapping = field(default_factory=dict)

    @property
    def image(self) -> bytes:
        return self.files[self.image_name]

    @property
    def kind(self) -> CarrierClass:
        return self.spec.kind

    def write(self, directory) -> tuple[Path, Path | None]:
        """Write image file(s) and cue into ``directory``; return (image, cue) paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            (directory / name).write_bytes(data)
        cue_path = None
        if self.cue_text is not None:
            cue_path = directory / self.cue_name
            cue_path.write_text(self.cue_text, encoding="utf-8", newline="\n")
        return directory / self.image_name, cue_path


def _materialize_tree(spec: ForgeSpec) -> dict[str, bytes]:
    tree = {}
    for path, value in (spec.tree or {}).items():
        if path.endswith("/"):
            tree[path] = b""
        elif isinstance(value, int):
            tree[path] = payload_bytes(spec.seed, path, value)
        else:
            tree[path] = bytes(value)
    if spec.kind is CarrierClass.DVD_VIDEO and not any(
        p.strip("/").split("/")[0].upper() == "VIDEO_TS" for p in tree
    ):
        tree["VIDEO_TS/"] = b""
    return tree


def _expected_files(tree: Mapping[str, bytes]) -> dict[str, bytes]:
    return {p: d for p, d in tree.items() if not p.endswith("/")}


def _check_size(spec: ForgeSpec, n: int) -> None:
    if n > spec.max_image_bytes:
        raise ForgeError(f"forged image of {n} bytes exceeds limit {spec.max_image_bytes}")


def _validate(spec: ForgeSpec) -> None:
    if not re.fullmatch(r"[A-Za-z0-9_.-]+", spec.label):
        raise ForgeError(f"label {spec.label!r} must be a plain file-name stem")
    if spec.kind in _DATA_KINDS:
        if spec.tree is None or spec.tracks is not None:
            raise ForgeError(f"{spec.kind.value} needs a tree and no tracks")
    elif spec.kind in _TRACK_KINDS:
        if not spec.tracks:
            raise ForgeError(f"{spec.kind.value} needs tracks")
        if len(spec.tracks) > 99:
            raise ForgeError("at most 99 tracks")
        audio = [t for t in spec.tracks if t.mode.is_audio]
        data = [t for t in spec.tracks if not t.mode.is_audio]
        for t in spec.tracks:
            if t.content not in ("random", "wav", "iso"):
                raise ForgeError(f"unknown track content {t.content!r}")
            if t.content == "wav" and not t.mode.is_audio:
                raise ForgeError("wav content needs an AUDIO track")
            if t.content == "iso" and t.mode.is_audio:
                raise ForgeError("iso content needs a data track")
            if t.mode.cue_token is None:
                raise ForgeError(f"{t.mode.name} cannot be written to a cue sheet")
            if t.sectors < 1 or t.pregap < 0:
                raise ForgeError("track sectors must be positive and pregap non-negative")
        if spec.kind is CarrierClass.RED_BOOK_AUDIO and (data or any(t.content == "wav" for t in audio)):
            raise ForgeError("RedBookAudio tracks must be raw AUDIO")
        if spec.kind is CarrierClass.MALFORMED_AUDIO_WAV and (data or not any(t.content == "wav" for t in audio)):
            raise ForgeError("MalformedAudioWav needs AUDIO tracks, at least one with wav content")
        if spec.kind is CarrierClass.MIXED_MODE and not (data and audio):
            raise ForgeError("MixedMode needs data and audio tracks")
        if any(t.content == "iso" for t in spec.tracks) and spec.tree is None:
            raise ForgeError("iso track content needs a tree")
        if not spec.multi_file and len({t.mode.raw_size for t in spec.tracks}) > 1:
            raise ForgeError("tracks with different raw sector sizes need multi_file")
    elif spec.tree is not None or spec.tracks is not None:
        raise ForgeError(f"{spec.kind.value} takes neither tree nor tracks")


def _blob(spec: ForgeSpec) -> bytes:
    size = spec.blob_size
    if spec.kind is CarrierClass.MDS_OPAQUE:
        size = max(size, len(MDS_SIGNATURE) + 2)
        return MDS_SIGNATURE + b"\x01\x05" + payload_bytes(spec.seed, "mds", size - len(MDS_SIGNATURE) - 2)
    if spec.kind is CarrierClass.HFS_PLUS:
        size = max(size, 1536)
        data = bytearray(payload_bytes(spec.seed, "hfs", size))
        data[:1024] = bytes(1024)
        header = (b"HX" if spec.hfsx else b"H+") + struct.pack(">H", 5 if spec.hfsx else 4)
        data[1024:1028] = header
        data[1028:1064] = bytes(36)
        data[1064:1068] = struct.pack(">I", 4096)
        data[1068:1072] = struct.pack(">I", max(1, size // 4096))
        return bytes(data)
    data = bytearray(payload_bytes(spec.seed, "unknown", size))
    if detect_mds(data):
        data[0] ^= 0xFF
    if detect_hfsplus(data):
        data[1024] ^= 0xFF
    if detect_iso9660(data):
        data[16 * ISO_BLOCK + 1] ^= 0xFF
    return bytes(data)


def _track_payload(spec: ForgeSpec, number: int, t: TrackSpec, iso: bytes | None) -> bytes:
    size = t.mode.user_data_size
    if t.content == "iso":
        return iso + b"\x00" * (-len(iso) % size)
    if t.content == "wav":
        return wrap_wav(payload_bytes(spec.seed, f"track{number:02d}", t.sectors * size - 44))
    return payload_bytes(spec.seed, f"track{number:02d}", t.sectors * size)


def forge(spec: ForgeSpec) -> ForgedCarrier:
    """Build the image (and cue) for ``spec`` together with its ground truth."""
    _validate(spec)
    truth: dict = {"kind": spec.kind.value, "label": spec.label, "seed": spec.seed,
                   "payload_algorithm": PAYLOAD_ALGORITHM, "mutations": []}

    if spec.kind in _BLOB_KINDS:
        _check_size(spec, spec.blob_size)
        ext = {CarrierClass.MDS_OPAQUE: ".mds", CarrierClass.HFS_PLUS: ".iso"}.get(spec.kind, ".img")
        name = spec.label + ext
        data = _blob(spec)
        truth["image_sha256"] = hashlib.sha256(data).hexdigest()
        return ForgedCarrier(spec, name, {name: data}, truth=truth)

    tree = _materialize_tree(spec) if spec.tree is not None else {}
    _check_size(spec, sum(len(v) for v in tree.values()))
    files_truth = {p: hashlib.sha256(d).hexdigest() for p, d in _expected_files(tree).items()}
    truth["volume_id"] = spec.volume_id
    truth["files"] = files_truth

    if spec.kind in _DATA_KINDS:
        udf = spec.kind in (CarrierClass.UDF_DATA_DISK, CarrierClass.DVD_VIDEO)
        image = build_iso(tree, spec.volume_id, joliet=spec.joliet, udf_bridge=udf)
        _check_size(spec, len(image))
        name = spec.label + ".iso"
        truth["image_sha256"] = hashlib.sha256(image).hexdigest()
        return ForgedCarrier(spec, name, {name: image}, tree=_expected_files(tree), truth=truth)

    iso = None
    if any(t.content == "iso" for t in spec.tracks):
        iso = build_iso(tree, spec.volume_id, joliet=spec.joliet)
    files: dict[str, bytes] = {}
    descriptors = []
    payloads = []
    sector_in_file: dict[str, int] = {}
    tracks_truth = []
    for number, t in enumerate(spec.tracks, start=1):
        payload = _track_payload(spec, number, t, iso)
        payloads.append(payload)
        file_name = f"{spec.label}-{number:02d}.bin" if spec.multi_file else f"{spec.label}.bin"
        start = sector_in_file.get(file_name, 0)
        n_sectors = len(payload) // t.mode.user_data_size
        if t.pregap and (start == 0 or t.pregap > descriptors[-1].length_sectors):
            raise ForgeError(f"track {number:02d}: pregap must fit inside the previous track of its file")
        raw = frame_track(t.mode, payload, first_lba=start)
        files[file_name] = files.get(file_name, b"") + raw
        _check_size(spec, sum(len(v) for v in files.values()))
        descriptors.append(TrackDescriptor(number, t.mode, file_name, start, n_sectors, t.pregap))
        sector_in_file[file_name] = start + n_sectors
        tracks_truth.append({
            "number": number, "mode": t.mode.name, "content": t.content, "sectors": n_sectors,
            "pregap": t.pregap, "payload_sha256": hashlib.sha256(payload).hexdigest(),
        })
    sheet = CueSheet(tuple(descriptors), tuple(dict.fromkeys(d.source_file for d in descriptors)))
    truth["tracks"] = tracks_truth
    truth["image_sha256"] = {n: hashlib.sha256(d).hexdigest() for n, d in files.items()}
    return ForgedCarrier(
        spec, sheet.source_files[0], files, spec.label + ".cue", format_cue(sheet), sheet,
        _expected_files(tree) if iso is not None else {}, tuple(payloads), truth,
    )


def corrupt(artifact: ForgedCarrier, mutation: BitFlip | Truncate | ZeroSector) -> ForgedCarrier:
    """Return a mutated copy of the artifact's primary image; the original is untouched."""
    data = bytearray(artifact.image)
    if isinstance(mutation, BitFlip):
        if not 0 <= mutation.offset < len(data) or not 0 <= mutation.bit < 8:
            raise ForgeError(f"bit flip at {mutation.offset}:{mutation.bit} out of range")
        data[mutation.offset] ^= 1 << mutation.bit
        record = {"type": "BitFlip", "offset": mutation.offset, "bit": mutation.bit}
    elif isinstance(mutation, Truncate):
        if not 0 <= mutation.length <= len(data):
            raise ForgeError(f"truncate length {mutation.length} out of range")
        del data[mutation.length:]
        record = {"type": "Truncate", "length": mutation.length}
    elif isinstance(mutation, ZeroSector):
        start = mutation.index * mutation.sector_size
        if mutation.index < 0 or start + mutation.sector_size > len(data):
            raise ForgeError(f"sector {mutation.index} out of range")
        data[start:start + mutation.sector_size] = bytes(mutation.sector_size)
        record = {"type": "ZeroSector", "index": mutation.index, "sector_size": mutation.sector_size}
    else:
        raise ForgeError(f"unknown mutation {mutation!r}")
    truth = dict(artifact.truth)
    truth["mutations"] = [*artifact.truth.get("mutations", []), record]
    files = dict(artifact.files)
    files[artifact.image_name] = bytes(data)
    return replace(artifact, files=files, truth=truth)


# ---------------------------------------------------------------------------
# corpora

BOUNDARY_SIZES = (0, 1, 2047, 2048, 2049)


def corpus_specs(count: int = 216, seed: int = 2016) -> list[ForgeSpec]:
    """A deterministic corpus cycling through all nine classes.

    File sizes include the block-boundary cases; track layouts vary from
    one to five tracks and include MODE1/2048 and MODE2/2352 data tracks.
    """
    kinds = list(CarrierClass)
    specs = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        s = seed + i
        label = f"C{i:04d}"
        size = BOUNDARY_SIZES[(i // len(kinds)) % len(BOUNDARY_SIZES)]
        other = (i * 37) % 3000
        tree: dict[str, bytes | int] = {"A.TIF": size, "DIR/B.TXT": other, "DIR/SUB/C.DAT": (i * 11) % 5000}
        if i % 4 == 0:
            tree["EMPTY/"] = b""
        n_tracks = 1 + (i // len(kinds)) % 5
        if kind in (CarrierClass.ISO_DATA_DISK, CarrierClass.UDF_DATA_DISK):
            specs.append(ForgeSpec(kind, label, tree, volume_id=f"EAP{i:03d}", seed=s))
        elif kind is CarrierClass.DVD_VIDEO:
            dvd = dict(tree)
            dvd["VIDEO_TS/VIDEO_TS.IFO"] = 2048
            dvd["VIDEO_TS/VTS_01_1.VOB"] = 6144 + size
            specs.append(ForgeSpec(kind, label, dvd, volume_id=f"DVD{i:03d}", seed=s))
        elif kind is CarrierClass.RED_BOOK_AUDIO:
            tracks = tuple(
                TrackSpec(SectorMode.AUDIO_2352, 2 + (i + n) % 4, pregap=1 if n and i % 2 else 0)
                for n in range(n_tracks)
            )
            specs.append(ForgeSpec(kind, label, tracks=tracks, seed=s))
        elif kind is CarrierClass.MALFORMED_AUDIO_WAV:
            tracks = tuple(TrackSpec(SectorMode.AUDIO_2352, 2 + (i + n) % 4, "wav") for n in range(n_tracks))
            specs.append(ForgeSpec(kind, label, tracks=tracks, seed=s))
        elif kind is CarrierClass.MIXED_MODE:
            variant = (i // len(kinds)) % 3
            data_mode = (SectorMode.MODE1_2352, SectorMode.MODE1_2048, SectorMode.MODE2_2352)[variant]
            audio = [TrackSpec(SectorMode.AUDIO_2352, 2 + n) for n in range(max(1, n_tracks - 1))]
            data = TrackSpec(data_mode, content="iso")
            # enhanced-CD layout (data last) on every other spec
            tracks = tuple([*audio, data] if i % 2 else [data, *audio])
            specs.append(ForgeSpec(kind, label, tree, tracks, volume_id=f"MIX{i:03d}", seed=s,
                                   multi_file=data_mode is SectorMode.MODE1_2048))
        else:
            specs.append(ForgeSpec(kind, label, seed=s, blob_size=4096 + 512 * (i % 5),
                                   hfsx=kind is CarrierClass.HFS_PLUS and i % 2 == 1))
    return specs


def dump_specs(specs, path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=1) + "\n", encoding="utf-8")


def load_specs(path) -> list[ForgeSpec]:
    return [ForgeSpec.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
