"""Raw CD sector framing, CUE sheet parsing, BIN track splitting and WAV wrapping.

Framing constants follow ECMA-130. EDC/ECC fields are dropped when
deframing and never verified; unreadable sectors are a carrier-level
problem, not something this codec tries to repair.
"""

from __future__ import annotations

import enum
import re
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

from .errors import CueError, TrackSplitError

FRAMES_PER_SECOND = 75
SECONDS_PER_MINUTE = 60

SYNC_PATTERN = b"\x00" + b"\xff" * 10 + b"\x00"
HEADER_SIZE = 16  # 12 sync + 3 address + 1 mode
MODE1_TRAILER_SIZE = 288  # 4 EDC + 8 zero + 276 ECC
MODE2_SUBHEADER_SIZE = 8

WAV_HEADER_SIZE = 44
CDDA_SAMPLE_RATE = 44100
CDDA_CHANNELS = 2
CDDA_BITS = 16


class SectorMode(enum.Enum):
    AUDIO_2352 = "AUDIO"
    MODE1_2048 = "MODE1/2048"
    MODE1_2352 = "MODE1/2352"
    MODE2_2352 = "MODE2/2352"
    # no cue token of its own; built programmatically
    MODE2_FORM1_2352 = "MODE2/FORM1"

    @property
    def raw_size(self) -> int:
        return 2048 if self is SectorMode.MODE1_2048 else 2352

    @property
    def user_data_size(self) -> int:
        return _USER_LAYOUT[self][1]

    @property
    def user_data_offset(self) -> int:
        return _USER_LAYOUT[self][0]

    @property
    def is_audio(self) -> bool:
        return self is SectorMode.AUDIO_2352

    @property
    def cue_token(self) -> str | None:
        return None if self is SectorMode.MODE2_FORM1_2352 else self.value


# mode -> (offset of user data inside the raw sector, user data length)
_USER_LAYOUT = {
    SectorMode.AUDIO_2352: (0, 2352),
    SectorMode.MODE1_2048: (0, 2048),
    SectorMode.MODE1_2352: (HEADER_SIZE, 2048),
    SectorMode.MODE2_2352: (HEADER_SIZE, 2336),
    SectorMode.MODE2_FORM1_2352: (HEADER_SIZE + MODE2_SUBHEADER_SIZE, 2048),
}

_CUE_MODES = {m.cue_token: m for m in SectorMode if m.cue_token}
_UNSUPPORTED_MODES = {"CDG", "MODE2/2336", "MODE2/2048", "MODE2/2324", "CDI/2336", "CDI/2352"}


class PayloadKind(enum.Enum):
    ISO_DATA = "IsoData"
    RAW_AUDIO = "RawAudio"
    WAV_WRAPPED_AUDIO = "WavWrappedAudio"


@dataclass(frozen=True)
class TrackDescriptor:
    number: int
    mode: SectorMode
    source_file: str
    start_sector: int
    # None until the source file size is known (last track of a file)
    length_sectors: int | None = None
    pregap_sectors: int = 0

    @property
    def start_byte(self) -> int:
        return self.start_sector * self.mode.raw_size


@dataclass(frozen=True)
class CueSheet:
    entries: tuple[TrackDescriptor, ...]
    source_files: tuple[str, ...]

    def __post_init__(self):
        if not self.entries:
            raise CueError("no tracks")
        numbers = [t.number for t in self.entries]
        if any(b <= a for a, b in zip(numbers, numbers[1:])):
            raise CueError("track numbers must be strictly increasing")
        for t in self.entries:
            if t.source_file not in self.source_files:
                raise CueError(f"track {t.number:02d} references unlisted file {t.source_file!r}")

    @property
    def has_audio(self) -> bool:
        return any(t.mode.is_audio for t in self.entries)

    @property
    def all_audio(self) -> bool:
        return all(t.mode.is_audio for t in self.entries)


@dataclass(frozen=True)
class TrackPayload:
    track: TrackDescriptor
    data: bytes = field(repr=False)
    suggested_kind: PayloadKind


def msf_to_sectors(text: str) -> int:
    m = re.fullmatch(r"(\d{1,3}):(\d{2}):(\d{2})", text)
    if not m:
        raise ValueError(f"malformed MM:SS:FF time {text!r}")
    minutes, seconds, frames = (int(g) for g in m.groups())
    if seconds >= SECONDS_PER_MINUTE or frames >= FRAMES_PER_SECOND:
        raise ValueError(f"time field out of range in {text!r}")
    return (minutes * SECONDS_PER_MINUTE + seconds) * FRAMES_PER_SECOND + frames


def sectors_to_msf(sectors: int) -> str:
    minutes, rest = divmod(sectors, SECONDS_PER_MINUTE * FRAMES_PER_SECOND)
    seconds, frames = divmod(rest, FRAMES_PER_SECOND)
    return f"{minutes:02d}:{seconds:02d}:{frames:02d}"


def decode_cue_bytes(raw: bytes) -> str:
    """Decode cue sheet bytes as UTF-8, falling back to Latin-1."""
    if raw.startswith(b"\xef\xbb\xbf"):
        raw = raw[3:]
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


_FILE_RE = re.compile(r'FILE\s+(?:"([^"]*)"|(\S+))\s+(\S+)\s*$', re.IGNORECASE)
_IGNORED_COMMANDS = {
    "REM", "CATALOG", "CDTEXTFILE", "FLAGS", "ISRC", "PERFORMER",
    "POSTGAP", "PREGAP", "SONGWRITER", "TITLE",
}


def parse_cue(text: str) -> CueSheet:
    """Parse cue sheet text into an ordered :class:`CueSheet`.

    ``INDEX 01`` becomes the track start; a track runs until the next
    track's ``INDEX 01`` in the same file, or to the end of that file
    (``length_sectors`` left as ``None``). Bytes between ``INDEX 00`` and
    ``INDEX 01`` of a track are therefore carried in the preceding
    track's payload; their count is kept in ``pregap_sectors``.
    """
    files: list[str] = []
    current_file: str | None = None
    # each pending track: dict(number, mode, file, indexes, line)
    pending: list[dict] = []

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        command = stripped.split(None, 1)[0].upper()
        args = stripped.split()[1:]

        if command == "FILE":
            m = _FILE_RE.match(stripped)
            if not m:
                raise CueError("malformed FILE command", lineno)
            current_file = m.group(1) if m.group(1) is not None else m.group(2)
            if current_file not in files:
                files.append(current_file)
        elif command == "TRACK":
            if current_file is None:
                raise CueError("TRACK before any FILE", lineno)
            if len(args) != 2 or not args[0].isdigit():
                raise CueError("malformed TRACK command", lineno)
            number = int(args[0])
            if not 1 <= number <= 99:
                raise CueError(f"track number {number} out of range 1-99", lineno)
            token = args[1].upper()
            if token not in _CUE_MODES:
                what = "unsupported" if token in _UNSUPPORTED_MODES else "unknown"
                raise CueError(f"{what} track mode {args[1]!r}", lineno)
            if any(p["number"] == number for p in pending):
                raise CueError(f"duplicate track number {number:02d}", lineno)
            if pending and number < pending[-1]["number"]:
                raise CueError(f"track {number:02d} out of order", lineno)
            pending.append(
                {"number": number, "mode": _CUE_MODES[token], "file": current_file,
                 "indexes": {}, "line": lineno}
            )
        elif command == "INDEX":
            if not pending:
                raise CueError("INDEX before any TRACK", lineno)
            if len(args) != 2 or not args[0].isdigit():
                raise CueError("malformed INDEX command", lineno)
            track = pending[-1]
            if track["file"] != current_file:
                raise CueError("INDEX refers to a FILE other than its TRACK's", lineno)
            idx = int(args[0])
            if idx in track["indexes"]:
                raise CueError(f"duplicate INDEX {idx:02d} in track {track['number']:02d}", lineno)
            try:
                track["indexes"][idx] = msf_to_sectors(args[1])
            except ValueError as exc:
                raise CueError(str(exc), lineno) from None
        elif command in _IGNORED_COMMANDS:
            continue
        else:
            raise CueError(f"unrecognised command {command!r}", lineno)

    if not pending:
        raise CueError("no tracks")

    entries = []
    for i, p in enumerate(pending):
        if 1 not in p["indexes"]:
            raise CueError(f"track {p['number']:02d} has no INDEX 01", p["line"])
        start = p["indexes"][1]
        pregap = start - p["indexes"][0] if 0 in p["indexes"] else 0
        if pregap < 0:
            raise CueError(f"track {p['number']:02d} INDEX 00 after INDEX 01", p["line"])
        length = None
        nxt = pending[i + 1] if i + 1 < len(pending) else None
        if nxt is not None and nxt["file"] == p["file"]:
            if 1 not in nxt["indexes"]:
                raise CueError(f"track {nxt['number']:02d} has no INDEX 01", nxt["line"])
            length = nxt["indexes"][1] - start
            if length <= 0:
                raise CueError(f"track {nxt['number']:02d} starts before track {p['number']:02d}", nxt["line"])
        entries.append(TrackDescriptor(p["number"], p["mode"], p["file"], start, length, pregap))
    return CueSheet(tuple(entries), tuple(files))


def format_cue(sheet: CueSheet) -> str:
    """Serialise a cue sheet; the inverse of :func:`parse_cue` for forge output."""
    lines = []
    current = None
    for t in sheet.entries:
        if t.mode.cue_token is None:
            raise CueError(f"track {t.number:02d}: {t.mode.name} has no cue sheet token")
        if t.source_file != current:
            current = t.source_file
            lines.append(f'FILE "{current}" BINARY')
        lines.append(f"  TRACK {t.number:02d} {t.mode.cue_token}")
        if t.pregap_sectors:
            lines.append(f"    INDEX 00 {sectors_to_msf(t.start_sector - t.pregap_sectors)}")
        lines.append(f"    INDEX 01 {sectors_to_msf(t.start_sector)}")
    return "\n".join(lines) + "\n"


def detect_riff(data: bytes) -> bool:
    """True when ``data`` starts with a RIFF/WAVE header."""
    return len(data) >= 12 and data[0:4] == b"RIFF" and data[8:12] == b"WAVE"


def wrap_wav(pcm: bytes) -> bytes:
    """Prefix CD-DA samples with a canonical 44-byte PCM WAVE header.

    An odd-length payload gets one zero pad byte which the data chunk
    size excludes (the RIFF size counts it, as RIFF chunk padding).
    """
    pad = len(pcm) & 1
    block_align = CDDA_CHANNELS * CDDA_BITS // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", len(pcm) + pad + 36, b"WAVE",
        b"fmt ", 16, 1, CDDA_CHANNELS, CDDA_SAMPLE_RATE,
        CDDA_SAMPLE_RATE * block_align, block_align, CDDA_BITS,
        b"data", len(pcm),
    )
    return header + pcm + b"\x00" * pad


def _bcd(value: int) -> int:
    return (value // 10) << 4 | value % 10


def sector_header(mode: SectorMode, lba: int) -> bytes:
    """Sync pattern plus BCD MSF address (with the 150-sector lead-in offset)."""
    minutes, rest = divmod(lba + 150, SECONDS_PER_MINUTE * FRAMES_PER_SECOND)
    seconds, frames = divmod(rest, FRAMES_PER_SECOND)
    mode_byte = 1 if mode is SectorMode.MODE1_2352 else 2
    return SYNC_PATTERN + bytes([_bcd(minutes % 100), _bcd(seconds), _bcd(frames), mode_byte])


def frame_track(mode: SectorMode, user_data: bytes, first_lba: int = 0) -> bytes:
    """Frame user data into raw sectors; inverse of the deframing in :func:`split_tracks`.

    EDC/ECC areas and the Mode 2 sub-header are written as zeros.
    """
    size = mode.user_data_size
    if len(user_data) % size:
        raise ValueError(f"{mode.name} user data must be a multiple of {size} bytes")
    if mode in (SectorMode.AUDIO_2352, SectorMode.MODE1_2048):
        return bytes(user_data)
    out = bytearray()
    tail = mode.raw_size - mode.user_data_offset - size
    for i in range(len(user_data) // size):
        out += sector_header(mode, first_lba + i)
        out += b"\x00" * (mode.user_data_offset - HEADER_SIZE)
        out += user_data[i * size:(i + 1) * size]
        out += b"\x00" * tail
    return bytes(out)


def deframe(mode: SectorMode, raw: bytes) -> bytes:
    if mode in (SectorMode.AUDIO_2352, SectorMode.MODE1_2048):
        return bytes(raw)
    off, size = mode.user_data_offset, mode.user_data_size
    view = memoryview(raw)
    return b"".join(
        view[s + off:s + off + size] for s in range(0, len(raw), mode.raw_size)
    )


def resolve_lengths(cue: CueSheet, sizes: Mapping[str, int]) -> CueSheet:
    """Fill in open-ended track lengths from source file sizes and check alignment."""
    resolved = []
    for t in cue.entries:
        if t.source_file not in sizes:
            raise TrackSplitError(f"missing source file {t.source_file!r}")
        size = sizes[t.source_file]
        raw = t.mode.raw_size
        others = {u.mode.raw_size for u in cue.entries if u.source_file == t.source_file}
        if len(others) > 1:
            raise TrackSplitError(
                f"{t.source_file!r} mixes sector sizes {sorted(others)}; cannot address tracks"
            )
        if size % raw:
            raise TrackSplitError(
                f"track {t.number:02d}: {t.source_file!r} is {size} bytes, "
                f"not a multiple of the {raw}-byte {t.mode.name} sector"
            )
        available = size // raw
        length = t.length_sectors
        if length is None:
            length = available - t.start_sector
        if length <= 0 or t.start_sector + length > available:
            raise TrackSplitError(
                f"track {t.number:02d}: sectors {t.start_sector}..{t.start_sector + (length or 0)} "
                f"exceed {t.source_file!r} ({available} sectors)"
            )
        resolved.append(replace(t, length_sectors=length))
    return CueSheet(tuple(resolved), cue.source_files)


def split_tracks(cue: CueSheet, bin_bytes_by_file: Mapping[str, bytes]) -> list[TrackPayload]:
    """Cut each track out of its source file and strip sector framing."""
    sizes = {name: len(data) for name, data in bin_bytes_by_file.items()}
    cue = resolve_lengths(cue, sizes)
    payloads = []
    for t in cue.entries:
        src = bin_bytes_by_file[t.source_file]
        begin = t.start_byte
        raw = src[begin:begin + t.length_sectors * t.mode.raw_size]
        data = deframe(t.mode, raw)
        if t.mode.is_audio:
            kind = PayloadKind.WAV_WRAPPED_AUDIO if detect_riff(data[:12]) else PayloadKind.RAW_AUDIO
        else:
            kind = PayloadKind.ISO_DATA
        payloads.append(TrackPayload(t, data, kind))
    return payloads
