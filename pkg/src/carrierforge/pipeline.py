"""Run processing plans for carriers and tidy the resulting project trees.

Project layout under an output root::

    <project>/masters/<carrier>/   images and cue sheets, never rewritten
    <project>/derived/<carrier>/   extracted files and WAV tracks
    <project>/native/<carrier>/    sibling (non-image) submissions
    <project>/metadata/<carrier>/  extraction sidecars and run records
    <project>/failed/<carrier>/    quarantined partial output
    <project>/manifest-sha256.txt  collection manifest
"""

from __future__ import annotations

import enum
import hashlib
import shutil
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote

from .classify import ProcessingPlan, Step, default_sources
from .detect import detect_iso9660
from .errors import CarrierForgeError, ManifestError, MergeConflict, PipelineError
from .fixity import MANIFEST_NAME, ChecksumManifest, iter_files, manifest_create, manifest_verify, sha256_file
from .iso import iso_extract
from .sectors import CueSheet, PayloadKind, SectorMode, TrackPayload, split_tracks, wrap_wav

MANUAL_PREFIX = "MANUAL:"
DUPLICATE_PREFIX = "DUPLICATE-OF:"
MANUAL_MARKER = "MANUAL.txt"


class Relation(enum.Enum):
    MASTER_IMAGE = "MasterImage"
    DERIVED_FROM_IMAGES = "DerivedFromImages"
    SIBLING_SUBMISSION = "SiblingSubmission"


_RELATION_DIRS = {
    Relation.MASTER_IMAGE: "masters",
    Relation.DERIVED_FROM_IMAGES: "derived",
    Relation.SIBLING_SUBMISSION: "native",
}


def _check_component(value: str, what: str) -> None:
    if not value or "/" in value or "\\" in value or ".." in value or value in (".",):
        raise PipelineError(f"{what} {value!r} must be non-empty with no path separators or '..'")


def directory_name(identifier: str) -> str:
    """Percent-encode a ledger identifier (``EAP256/1/1``) into one path component, reversibly."""
    return quote(identifier, safe="#")


def layout_path(project_id: str, carrier_id: str, relation: Relation) -> Path:
    """Relative directory for a carrier's content, e.g. ``EAP256/derived/C0001``."""
    _check_component(project_id, "project id")
    _check_component(carrier_id, "carrier id")
    return Path(project_id, _RELATION_DIRS[relation], carrier_id)


@dataclass
class StabilizedOutput:
    carrier_id: str
    master_image_paths: list[Path]
    derived_paths: list[Path]
    plan: ProcessingPlan
    manifest_ref: Path
    notes: list[str] = field(default_factory=list)
    metadata_paths: list[Path] = field(default_factory=list)

    @property
    def master_bytes(self) -> int:
        return sum(p.stat().st_size for p in self.master_image_paths)

    def to_dict(self) -> dict:
        return {
            "carrier_id": self.carrier_id,
            "master_image_paths": [str(p) for p in self.master_image_paths],
            "derived_paths": [str(p) for p in self.derived_paths],
            "metadata_paths": [str(p) for p in self.metadata_paths],
            "plan": self.plan.to_dict(),
            "manifest_ref": str(self.manifest_ref),
            "notes": self.notes,
        }


class CarrierFailed(PipelineError):
    """A plan step failed; partial output was moved to ``quarantine``."""

    def __init__(self, carrier_id: str, cause: Exception, quarantine: Path | None,
                 masters: Sequence[Path] = ()):
        self.carrier_id = carrier_id
        self.cause = cause
        self.quarantine = quarantine
        self.masters = list(masters)
        super().__init__(f"{carrier_id}: {cause}")


def _write_master(target: Path, data: bytes) -> Path:
    if target.exists():
        if sha256_file(target) != hashlib.sha256(data).hexdigest():
            raise PipelineError(f"master {target} already exists with different content")
        return target
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "xb") as fh:
        fh.write(data)
    return target


def _new_file(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "xb") as fh:
        fh.write(data)
    return path


def _quarantine(project_dir: Path, carrier_id: str, derived: Path, metadata: Path) -> Path | None:
    moved = [p for p in (derived, metadata) if p.exists()]
    if not moved:
        return None
    base = project_dir / "failed" / carrier_id
    n = 1
    while (base / f"attempt-{n}").exists():
        n += 1
    dest = base / f"attempt-{n}"
    dest.mkdir(parents=True)
    for p in moved:
        shutil.move(str(p), str(dest / p.parent.name))
    return dest


def run_plan(carrier_id: str, image, cue: CueSheet | None, plan: ProcessingPlan, output_root, *,
             project_id: str, image_name: str, sources: Mapping[str, bytes] | None = None,
             cue_name: str | None = None, cue_text: str | None = None) -> StabilizedOutput:
    """Execute ``plan`` for one carrier and return what was written.

    ``image_name`` names the master copy. For cue inputs ``sources`` maps
    each FILE of the cue to its bytes (the image alone for single-file
    cues) and ``cue_text`` is kept verbatim next to the masters.

    A failing step raises :class:`CarrierFailed` after moving the
    carrier's derived and metadata output under ``failed/``. Masters are
    left in place.
    """
    output_root = Path(output_root)
    project_dir = output_root / project_id
    masters_dir = output_root / layout_path(project_id, carrier_id, Relation.MASTER_IMAGE)
    derived_dir = output_root / layout_path(project_id, carrier_id, Relation.DERIVED_FROM_IMAGES)
    metadata_dir = project_dir / "metadata" / carrier_id
    _check_component(image_name, "image name")

    out = StabilizedOutput(carrier_id, [], [], plan, project_dir / MANIFEST_NAME)
    if cue is not None and sources is None:
        sources = default_sources(image, cue)
    payloads: list[TrackPayload] = []
    try:
        for step in plan.steps:
            if step is Step.KEEP_IMAGE_AS_MASTER:
                files = dict(sources) if cue is not None else {image_name: image}
                if cue is not None and image_name not in files:
                    files[image_name] = image
                for name, data in files.items():
                    _check_component(name, "image file name")
                    out.master_image_paths.append(_write_master(masters_dir / name, data))
                if cue_text is not None:
                    name = cue_name or Path(image_name).stem + ".cue"
                    _check_component(name, "cue name")
                    out.master_image_paths.append(_write_master(masters_dir / name, cue_text.encode("utf-8")))
            elif step is Step.SPLIT_TRACKS:
                if cue is None:
                    raise PipelineError("SplitTracks needs a cue sheet")
                payloads = split_tracks(cue, sources)
                for p in payloads:
                    if p.track.pregap_sectors:
                        out.notes.append(
                            f"track {p.track.number:02d}: {p.track.pregap_sectors} pregap sectors "
                            "kept inside the preceding track"
                        )
                    if p.track.mode in (SectorMode.MODE2_2352, SectorMode.MODE2_FORM1_2352):
                        out.notes.append(f"track {p.track.number:02d}: MODE2 user data, sub-header not interpreted")
            elif step is Step.EXTRACT_ISO_FILES:
                _extract_step(out, image, cue, payloads, derived_dir, metadata_dir)
            elif step in (Step.WRAP_AUDIO_WAV, Step.COPY_WAV_VERBATIM):
                for p in payloads:
                    if not p.track.mode.is_audio:
                        continue
                    target = derived_dir / f"track{p.track.number:02d}.wav"
                    if p.suggested_kind is PayloadKind.WAV_WRAPPED_AUDIO:
                        data = p.data
                        if step is Step.WRAP_AUDIO_WAV:
                            out.notes.append(f"track {p.track.number:02d}: already RIFF/WAVE, copied verbatim")
                    else:
                        data = wrap_wav(p.data)
                        if step is Step.COPY_WAV_VERBATIM:
                            out.notes.append(f"track {p.track.number:02d}: raw audio, wrapped as WAV")
                    out.derived_paths.append(_new_file(target, data))
            elif step is Step.FLAG_FOR_MANUAL:
                marker = derived_dir / MANUAL_MARKER
                line = f"{MANUAL_PREFIX} {plan.carrier_class.value}: {plan.rationale}\n"
                out.derived_paths.append(_new_file(marker, line.encode("utf-8")))
                out.notes.append("flagged for manual handling")
            else:
                raise PipelineError(f"unsupported step {step}")
        if not out.master_image_paths:
            raise PipelineError("plan produced no master image")
    except (CarrierForgeError, OSError) as exc:
        where = _quarantine(project_dir, carrier_id, derived_dir, metadata_dir)
        raise CarrierFailed(carrier_id, exc, where, out.master_image_paths) from exc
    return out


def _extract_step(out: StabilizedOutput, image, cue, payloads, derived_dir: Path, metadata_dir: Path) -> None:
    if cue is None:
        targets = [("files", image)]
    else:
        targets = [(f"track{p.track.number:02d}", p.data) for p in payloads
                   if p.suggested_kind is PayloadKind.ISO_DATA]
    for name, data in targets:
        if detect_iso9660(data) is None:
            if cue is None:
                raise PipelineError("image has no ISO 9660 volume descriptor")
            out.notes.append(f"{name}: data track is not ISO 9660; left in master only")
            continue
        dest = derived_dir / name
        sidecar = metadata_dir / f"extraction-{name}.json"
        report = iso_extract(data, dest, sidecar=sidecar)
        out.metadata_paths.append(sidecar)
        for e in report.entries:
            if not e.is_directory:
                out.derived_paths.append(dest.joinpath(*e.path.split("/")))


# ---------------------------------------------------------------------------
# merging and de-duplication


@dataclass
class MergeReport:
    project_root: Path
    copied: list[str] = field(default_factory=list)
    merged: list[dict] = field(default_factory=list)
    already_present: list[str] = field(default_factory=list)
    manifest_path: Path | None = None
    manifest_entries: int = 0

    @property
    def is_empty(self) -> bool:
        return not (self.copied or self.merged)

    def to_dict(self) -> dict:
        return {
            "project_root": str(self.project_root),
            "copied": self.copied,
            "merged": self.merged,
            "already_present": self.already_present,
            "manifest_path": str(self.manifest_path) if self.manifest_path else None,
            "manifest_entries": self.manifest_entries,
        }


def load_verified_manifest(root: Path) -> ChecksumManifest:
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise PipelineError(f"{root} has no {MANIFEST_NAME}")
    manifest = ChecksumManifest.load(path)
    report = manifest_verify(manifest, root)
    if not report.clean:
        raise PipelineError(
            f"{root} does not verify against its manifest: {len(report.mismatched)} mismatched, "
            f"{len(report.missing)} missing, {len(report.extra)} extra"
        )
    return manifest


def _points_to(project_root: Path, target: Path, digest: str) -> bool:
    """Whether ``target`` is a dedupe pointer to a file with ``digest``."""
    if target.stat().st_size > 4096 or not _is_pointer(target):
        return False
    line = target.read_text(encoding="utf-8").strip()
    if not line.startswith(DUPLICATE_PREFIX):
        return False
    rel = line[len(DUPLICATE_PREFIX):]
    if not rel or rel.startswith("/") or ".." in rel.split("/"):
        return False
    kept = project_root / rel
    return kept.is_file() and sha256_file(kept) == digest


def merge_batches(batch_roots: Sequence, project_root, *, dry_run: bool = False) -> MergeReport:
    """Union verified batch trees into ``project_root`` and write a consolidated manifest.

    Every batch must verify against its own manifest first. The same path
    with the same digest is merged; with a different digest nothing is
    copied and :class:`MergeConflict` names both sources.
    """
    project_root = Path(project_root)
    report = MergeReport(project_root)
    plan: dict[str, tuple[str, Path]] = {}
    conflicts = []
    present: set[str] = set()
    existing = {}
    if (project_root / MANIFEST_NAME).is_file():
        existing = load_verified_manifest(project_root).as_dict()
    for root in map(Path, batch_roots):
        manifest = load_verified_manifest(root)
        for rel, digest in manifest.entries:
            src = root / rel
            if rel in plan:
                if plan[rel][0] != digest:
                    conflicts.append(f"{rel}: {plan[rel][1]} ({plan[rel][0][:12]}) vs {src} ({digest[:12]})")
                elif rel not in present:
                    report.merged.append({"path": rel, "sources": [str(plan[rel][1]), str(src)], "digest": digest})
                continue
            target = project_root / rel
            if target.exists():
                have = existing.get(rel) or sha256_file(target)
                if have != digest and not _points_to(project_root, target, digest):
                    conflicts.append(f"{rel}: {target} ({have[:12]}) vs {src} ({digest[:12]})")
                    continue
                report.already_present.append(rel)
                present.add(rel)
            plan[rel] = (digest, src)
    if conflicts:
        raise MergeConflict("digest conflicts: " + "; ".join(conflicts))
    report.copied = sorted((rel for rel in plan if rel not in present), key=lambda p: p.encode())
    if dry_run:
        return report
    for rel in report.copied:
        target = project_root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(plan[rel][1], target)
    manifest = manifest_create(project_root)
    report.manifest_path = manifest.write(project_root / MANIFEST_NAME)
    report.manifest_entries = len(manifest.entries)
    return report


@dataclass
class DedupeRecord:
    kept_path: str
    duplicate_paths: list[str]
    digest: str

    def to_dict(self) -> dict:
        return {"kept_path": self.kept_path, "duplicate_paths": self.duplicate_paths, "digest": self.digest}


def _is_pointer(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(len(DUPLICATE_PREFIX))
    return head.startswith((DUPLICATE_PREFIX.encode(), MANUAL_PREFIX.encode()))


def dedupe(project_root, *, apply: bool = False) -> list[DedupeRecord]:
    """Group files of the consolidated manifest by digest.

    In each group the byte-wise smallest path is kept and the others are
    reported; with ``apply=True`` they are replaced by a one-line
    ``DUPLICATE-OF:<path>`` pointer and the manifest is rewritten. Empty
    files and existing pointer/marker records are never grouped.
    """
    project_root = Path(project_root)
    manifest_path = project_root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"{project_root} has no consolidated {MANIFEST_NAME}")
    manifest = ChecksumManifest.load(manifest_path)
    groups: dict[str, list[str]] = defaultdict(list)
    for rel, digest in manifest.entries:
        groups[digest].append(rel)
    records = []
    empty = hashlib.sha256(b"").hexdigest()
    for digest, paths in groups.items():
        if len(paths) < 2 or digest == empty:
            continue
        for rel in paths:
            path = project_root / rel
            if not path.is_file() or sha256_file(path) != digest:
                raise ManifestError(f"manifest out of date: {rel} no longer matches its recorded digest")
        paths = [p for p in paths if not _is_pointer(project_root / p)]
        if len(paths) < 2:
            continue
        paths.sort(key=lambda p: p.encode("utf-8"))
        records.append(DedupeRecord(paths[0], paths[1:], digest))
    records.sort(key=lambda r: r.kept_path.encode("utf-8"))
    if apply and records:
        for r in records:
            for dup in r.duplicate_paths:
                (project_root / dup).write_text(f"{DUPLICATE_PREFIX}{r.kept_path}\n", encoding="utf-8")
        manifest_create(project_root).write(manifest_path)
    return records

