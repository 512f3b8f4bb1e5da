"""Stabilize content from optical carrier images.

Classify disk images, run the matching extraction chain, write SHA-256
manifests and keep a stabilization ledger.
"""

__version__ = "0.1.0"

from .classify import CarrierClass, ProcessingPlan, Step, classify, plan_for
from .detect import (
    FsFamily, VolumeInfo, detect_dvd_video, detect_hfsplus, detect_iso9660, detect_mds, detect_udf,
)
from .fixity import (
    ChecksumManifest, VerificationReport, bag_pack, bag_verify, manifest_create, manifest_normalize,
    manifest_verify,
)
from .iso import ExtractionReport, IsoEntry, iso_extract, iso_list
from .sectors import (
    CueSheet, PayloadKind, SectorMode, TrackDescriptor, TrackPayload, detect_riff, parse_cue, split_tracks,
    wrap_wav,
)

__all__ = [
    "CarrierClass", "ChecksumManifest", "CueSheet", "ExtractionReport", "FsFamily", "IsoEntry",
    "PayloadKind", "ProcessingPlan", "SectorMode", "Step", "TrackDescriptor", "TrackPayload",
    "VerificationReport", "VolumeInfo", "bag_pack", "bag_verify", "classify", "detect_dvd_video",
    "detect_hfsplus", "detect_iso9660", "detect_mds", "detect_riff", "detect_udf", "iso_extract",
    "iso_list", "manifest_create", "manifest_normalize", "manifest_verify", "parse_cue", "plan_for",
    "split_tracks", "wrap_wav",
]
