"""Carrier classification and the per-class processing plan."""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass

from . import detect
from .errors import CarrierForgeError
from .iso import iso_list
from .sectors import CueSheet, PayloadKind, TrackPayload, split_tracks


class CarrierClass(enum.Enum):
    ISO_DATA_DISK = "IsoDataDisk"
    UDF_DATA_DISK = "UdfDataDisk"
    DVD_VIDEO = "DvdVideo"
    HFS_PLUS = "HfsPlus"
    RED_BOOK_AUDIO = "RedBookAudio"
    MIXED_MODE = "MixedMode"
    MALFORMED_AUDIO_WAV = "MalformedAudioWav"
    MDS_OPAQUE = "MdsOpaque"
    UNKNOWN = "Unknown"


class Step(enum.Enum):
    KEEP_IMAGE_AS_MASTER = "KeepImageAsMaster"
    SPLIT_TRACKS = "SplitTracks"
    WRAP_AUDIO_WAV = "WrapAudioWav"
    COPY_WAV_VERBATIM = "CopyWavVerbatim"
    EXTRACT_ISO_FILES = "ExtractIsoFiles"
    FLAG_FOR_MANUAL = "FlagForManual"


@dataclass(frozen=True)
class ProcessingPlan:
    carrier_class: CarrierClass
    steps: tuple[Step, ...]
    rationale: str

    @property
    def needs_manual(self) -> bool:
        return Step.FLAG_FOR_MANUAL in self.steps

    def to_dict(self) -> dict:
        return {
            "class": self.carrier_class.value,
            "steps": [s.value for s in self.steps],
            "rationale": self.rationale,
        }


_K, _S, _W, _C, _X, _M = (
    Step.KEEP_IMAGE_AS_MASTER, Step.SPLIT_TRACKS, Step.WRAP_AUDIO_WAV,
    Step.COPY_WAV_VERBATIM, Step.EXTRACT_ISO_FILES, Step.FLAG_FOR_MANUAL,
)

_PLANS: dict[CarrierClass, tuple[tuple[Step, ...], str]] = {
    CarrierClass.ISO_DATA_DISK: ((_K, _X), "ISO 9660 data disk: keep image, extract files"),
    CarrierClass.UDF_DATA_DISK: ((_K, _X), "UDF bridge data disk: keep image, extract files from the ISO 9660 side"),
    CarrierClass.DVD_VIDEO: ((_K, _X), "DVD-Video (VIDEO_TS present): keep image, extract VOB/IFO files"),
    CarrierClass.HFS_PLUS: ((_K, _M), "HFS+ volume: image kept, file extraction needs manual handling"),
    CarrierClass.RED_BOOK_AUDIO: ((_K, _S, _W), "Red Book audio: split raw tracks and wrap as WAV"),
    CarrierClass.MIXED_MODE: ((_K, _S, _X, _W), "mixed mode: extract files from data tracks, wrap audio tracks as WAV"),
    CarrierClass.MALFORMED_AUDIO_WAV: ((_K, _S, _C), "audio-layout tracks already hold RIFF/WAVE data: copy them verbatim"),
    CarrierClass.MDS_OPAQUE: ((_K, _M), "MDS container has no public specification: image kept, manual handling"),
    CarrierClass.UNKNOWN: ((_K, _M), "no known signature: image kept, manual handling"),
}


def plan_for(carrier_class: CarrierClass) -> ProcessingPlan:
    steps, rationale = _PLANS[carrier_class]
    return ProcessingPlan(carrier_class, steps, rationale)


def default_sources(image, cue: CueSheet) -> Mapping[str, bytes]:
    if len(cue.source_files) != 1:
        raise CarrierForgeError("multi-file cue sheets need an explicit sources mapping")
    return {cue.source_files[0]: image}


def data_payload(image, cue: CueSheet | None, sources: Mapping[str, bytes] | None = None,
                 tracks: list[TrackPayload] | None = None):
    """The bytes a filesystem detector should look at: the image, or the first data track."""
    if cue is None:
        return image
    if tracks is None:
        tracks = split_tracks(cue, sources or default_sources(image, cue))
    for t in tracks:
        if t.suggested_kind is PayloadKind.ISO_DATA:
            return t.data
    return b""


def _has_video_ts(payload) -> bool:
    try:
        return detect.detect_dvd_video(iso_list(payload, max_depth=1))
    except CarrierForgeError:
        return False


def classify(image, cue: CueSheet | None = None, *, sources: Mapping[str, bytes] | None = None) -> CarrierClass:
    """Assign a carrier to exactly one class. Never raises; ``UNKNOWN`` is the sink."""
    if detect.detect_mds(image):
        return CarrierClass.MDS_OPAQUE

    payload = image
    if cue is not None:
        try:
            tracks = split_tracks(cue, sources or default_sources(image, cue))
        except CarrierForgeError:
            return CarrierClass.UNKNOWN
        if cue.has_audio:
            if cue.all_audio:
                if any(t.suggested_kind is PayloadKind.WAV_WRAPPED_AUDIO for t in tracks):
                    return CarrierClass.MALFORMED_AUDIO_WAV
                return CarrierClass.RED_BOOK_AUDIO
            return CarrierClass.MIXED_MODE
        payload = data_payload(image, cue, tracks=tracks)

    if detect.detect_hfsplus(payload):
        return CarrierClass.HFS_PLUS
    if detect.detect_iso9660(payload):
        if _has_video_ts(payload):
            return CarrierClass.DVD_VIDEO
        if detect.detect_udf(payload):
            return CarrierClass.UDF_DATA_DISK
        return CarrierClass.ISO_DATA_DISK
    return CarrierClass.UNKNOWN
