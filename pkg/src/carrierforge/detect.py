"""Signature-level detection of the container families found on optical carriers.

Every detector takes anything with ``len()`` and slicing (bytes, bytearray,
memoryview, mmap) and returns ``None`` rather than raising on short or
garbled input.
"""

from __future__ import annotations

import enum
import struct
from collections.abc import Iterable
from dataclasses import dataclass

ISO_BLOCK = 2048
DESCRIPTOR_START = 16 * ISO_BLOCK
# guards against scanning a huge zero-filled image forever
MAX_DESCRIPTORS = 64

MDS_SIGNATURE = b"MEDIA DESCRIPTOR"
HFS_HEADER_OFFSET = 1024
_VRS_IDENTIFIERS = {b"BEA01", b"NSR02", b"NSR03", b"TEA01", b"CD001", b"BOOT2", b"CDW02"}


class FsFamily(enum.Enum):
    ISO9660 = "Iso9660"
    UDF = "Udf"
    HFS_PLUS = "HfsPlus"
    MDS_CONTAINER = "MdsContainer"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class VolumeInfo:
    family: FsFamily
    volume_id: str = ""
    block_size: int = ISO_BLOCK
    detail: str = ""


def iter_descriptors(image) -> Iterable[tuple[int, bytes]]:
    """Yield (sector, 2048-byte structure) from sector 16 while data remains."""
    for i in range(MAX_DESCRIPTORS):
        start = DESCRIPTOR_START + i * ISO_BLOCK
        block = bytes(image[start:start + ISO_BLOCK])
        if len(block) < ISO_BLOCK:
            return
        yield 16 + i, block


def find_primary_descriptor(image) -> bytes | None:
    for _, block in iter_descriptors(image):
        if block[1:6] != b"CD001":
            return None
        if block[0] == 1:
            return block
        if block[0] == 255:
            return None
    return None


def detect_iso9660(image) -> VolumeInfo | None:
    pvd = find_primary_descriptor(image)
    if pvd is None:
        return None
    block_size = struct.unpack_from("<H", pvd, 128)[0] or ISO_BLOCK
    volume_id = pvd[40:72].decode("ascii", "replace").rstrip(" \x00")
    return VolumeInfo(FsFamily.ISO9660, volume_id, block_size)


def detect_udf(image) -> VolumeInfo | None:
    seen_bea = False
    nsr = None
    for _, block in iter_descriptors(image):
        ident = block[1:6]
        if ident not in _VRS_IDENTIFIERS:
            break
        if ident == b"BEA01":
            seen_bea = True
        elif ident in (b"NSR02", b"NSR03") and seen_bea:
            nsr = ident.decode()
        elif ident == b"TEA01":
            if seen_bea and nsr:
                return VolumeInfo(FsFamily.UDF, "", ISO_BLOCK, nsr)
            seen_bea = False
    return None


def detect_hfsplus(image) -> VolumeInfo | None:
    header = bytes(image[HFS_HEADER_OFFSET:HFS_HEADER_OFFSET + 44])
    if len(header) < 2:
        return None
    sig = header[:2]
    if sig not in (b"H+", b"HX"):
        return None
    block_size = 0
    if len(header) >= 44:
        block_size = struct.unpack_from(">I", header, 40)[0]
    return VolumeInfo(
        FsFamily.HFS_PLUS, "", block_size or 512, "HFSX" if sig == b"HX" else "HFS+"
    )


def detect_mds(image) -> VolumeInfo | None:
    if bytes(image[:len(MDS_SIGNATURE)]) != MDS_SIGNATURE:
        return None
    return VolumeInfo(FsFamily.MDS_CONTAINER, "", ISO_BLOCK, "signature only; not parsed")


def detect_dvd_video(entries) -> bool:
    """True when a root listing holds a ``VIDEO_TS`` directory."""
    return any(
        e.is_directory and "/" not in e.path and e.path.upper() == "VIDEO_TS"
        for e in entries
    )


def detect_all(image) -> list[VolumeInfo]:
    """Run every byte-level detector; order is most specific first."""
    found = []
    for detector in (detect_mds, detect_hfsplus, detect_iso9660, detect_udf):
        info = detector(image)
        if info is not None:
            found.append(info)
    return found
