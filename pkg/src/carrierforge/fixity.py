"""SHA-256 collection manifests and BagIt packaging.

Canonical manifest form: one ``<64 lowercase hex><SP><relative/path>``
line per file, LF line endings, UTF-8, sorted by the path's UTF-8 bytes.
Foreign manifests come in through :func:`manifest_normalize`.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import os
import re
import shutil
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BagError, ManifestError, ManifestFormatError

ALGORITHM = "sha256"
MANIFEST_NAME = "manifest-sha256.txt"
BAGIT_DECLARATION = "BagIt-Version: 0.97\nTag-File-Character-Encoding: UTF-8\n"
CHUNK = 1 << 20

_HEX64 = re.compile(r"[0-9a-fA-F]{64}")
_CANONICAL_DIGEST = re.compile(r"[0-9a-f]{64}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def _sort_key(path: str) -> bytes:
    return path.encode("utf-8", "surrogateescape")


@dataclass
class ChecksumManifest:
    root: str
    entries: list[tuple[str, str]]
    created_at: dt.datetime | None = None
    algorithm: str = ALGORITHM
    normalization_log: list[str] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: _sort_key(e[0]))
        seen = set()
        for path, digest in self.entries:
            if path in seen:
                raise ManifestFormatError(f"duplicate path {path!r}")
            seen.add(path)
            if not _CANONICAL_DIGEST.fullmatch(digest):
                raise ManifestFormatError(f"{path!r}: digest {digest!r} is not 64 lowercase hex")

    def as_dict(self) -> dict[str, str]:
        return dict(self.entries)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.entries]

    def serialize(self, prefix: str = "") -> str:
        return "".join(f"{digest} {prefix}{path}\n" for path, digest in self.entries)

    def write(self, path, prefix: str = "") -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.serialize(prefix))
        return path

    @classmethod
    def parse(cls, text: str, root: str = "") -> ChecksumManifest:
        """Parse canonical manifest text; anything else raises."""
        entries = []
        for lineno, line in enumerate(text.split("\n"), start=1):
            if not line:
                continue
            digest, sep, path = line.partition(" ")
            if not sep or not _CANONICAL_DIGEST.fullmatch(digest) or not path:
                raise ManifestFormatError("not a canonical manifest line", lineno)
            entries.append((path, digest))
        return cls(root, entries)

    @classmethod
    def load(cls, path) -> ChecksumManifest:
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), root=str(path.parent))


@dataclass
class VerificationReport:
    ok: list[str] = field(default_factory=list)
    mismatched: list[tuple[str, str, str]] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.mismatched or self.missing or self.extra)

    def to_dict(self) -> dict:
        return {
            "clean": self.clean,
            "ok": self.ok,
            "mismatched": [{"path": p, "expected": e, "actual": a} for p, e, a in self.mismatched],
            "missing": self.missing,
            "extra": self.extra,
        }


def iter_files(root, exclude: Iterable[str] = ()) -> list[str]:
    """Regular files under ``root`` as sorted forward-slash relative paths.

    Symlinks are not followed or listed; ``exclude`` names top-level
    relative paths to skip.
    """
    root = Path(root)
    skip = set(exclude)
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        rel_dir = Path(dirpath).relative_to(root)
        for name in filenames:
            full = Path(dirpath, name)
            if full.is_symlink() or not full.is_file():
                continue
            rel = (rel_dir / name).as_posix()
            if rel not in skip:
                found.append(rel)
    return sorted(found, key=_sort_key)


def _hash_all(root: Path, rels: list[str], workers: int) -> list[str]:
    def one(rel: str) -> str:
        try:
            return sha256_file(root / rel)
        except OSError as exc:
            raise ManifestError(f"cannot read {rel}: {exc.strerror or exc}") from exc

    if workers > 1 and len(rels) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, rels))
    return [one(r) for r in rels]


def manifest_create(root, *, exclude: Iterable[str] = (MANIFEST_NAME,), workers: int = 1) -> ChecksumManifest:
    """Hash every regular file under ``root`` (binary mode) into a manifest.

    A top-level ``manifest-sha256.txt`` is skipped by default so the
    manifest can live inside the collection it describes.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    rels = iter_files(root, exclude)
    digests = _hash_all(root, rels, workers)
    return ChecksumManifest(
        str(root), list(zip(rels, digests)), dt.datetime.now(dt.timezone.utc)
    )


def manifest_verify(manifest: ChecksumManifest, root, *, exclude: Iterable[str] = (MANIFEST_NAME,),
                    workers: int = 1) -> VerificationReport:
    root = Path(root)
    report = VerificationReport()
    expected = manifest.as_dict()
    on_disk = iter_files(root, exclude) if root.is_dir() else []
    present = [p for p in manifest.paths if (root / p).is_file() and not (root / p).is_symlink()]
    actual = dict(zip(present, _hash_all(root, present, workers)))
    for path, digest in manifest.entries:
        if path not in actual:
            report.missing.append(path)
        elif actual[path] != digest:
            report.mismatched.append((path, digest, actual[path]))
        else:
            report.ok.append(path)
    report.extra = [p for p in on_disk if p not in expected]
    return report


def decode_manifest_bytes(raw: bytes, encoding: str | None = None) -> tuple[str, list[str]]:
    log = []
    if raw.startswith(b"\xef\xbb\xbf"):
        raw = raw[3:]
        log.append("removed UTF-8 byte order mark")
    if encoding:
        return raw.decode(encoding), log
    try:
        return raw.decode("utf-8"), log
    except UnicodeDecodeError:
        log.append("decoded as Latin-1 (not valid UTF-8)")
        return raw.decode("latin-1"), log


_BSD_LINE = re.compile(r"SHA256 \((.*)\) = ([0-9a-fA-F]{64})")


def manifest_normalize(raw_text: str | bytes, declared_conventions: Mapping | None = None) -> ChecksumManifest:
    """Convert a foreign ``digest path`` manifest to canonical form.

    Handles upper-case hex, ``*`` binary and space text-mode markers,
    backslash separators, CRLF endings, ``./`` prefixes, BSD-style
    ``SHA256 (path) = digest`` lines and Latin-1 text. Every change is
    written to ``normalization_log``.

    ``declared_conventions`` may carry ``encoding`` (forces the decoding
    of byte input) and ``strip_prefix`` (a leading directory to remove).
    """
    conventions = dict(declared_conventions or {})
    log: list[str] = []
    if isinstance(raw_text, bytes):
        text, log = decode_manifest_bytes(raw_text, conventions.get("encoding"))
    else:
        text = raw_text
        if text.startswith("\ufeff"):
            text = text[1:]
            log.append("removed byte order mark")
    strip_prefix = conventions.get("strip_prefix", "").replace("\\", "/").strip("/")

    entries: dict[str, str] = {}
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        if line.endswith("\r"):
            line = line[:-1]
            log.append(f"line {lineno}: removed CR line ending")
        if not line.strip() or line.lstrip().startswith("#"):
            log.append(f"line {lineno}: skipped blank or comment line")
            continue
        bsd = _BSD_LINE.fullmatch(line)
        if bsd:
            path, digest = bsd.group(1), bsd.group(2)
            log.append(f"line {lineno}: converted BSD-style line")
        else:
            digest = line[:64]
            if not _HEX64.fullmatch(digest) or len(line) < 66 or line[64] not in " \t":
                raise ManifestFormatError("no 64-hex-digit digest followed by a path", lineno)
            if line[64] == "\t":
                log.append(f"line {lineno}: tab separator replaced")
            path = line[65:]
            if path.startswith("*"):
                path = path[1:]
                log.append(f"line {lineno}: stripped binary-mode marker '*'")
            elif path.startswith(" "):
                path = path[1:]
                log.append(f"line {lineno}: stripped text-mode marker")
        if digest != digest.lower():
            digest = digest.lower()
            log.append(f"line {lineno}: lower-cased digest")
        if "\\" in path:
            path = path.replace("\\", "/")
            log.append(f"line {lineno}: converted backslashes to forward slashes")
        while path.startswith("./"):
            path = path[2:]
            log.append(f"line {lineno}: removed leading './'")
        if strip_prefix and path.startswith(strip_prefix + "/"):
            path = path[len(strip_prefix) + 1:]
            log.append(f"line {lineno}: removed prefix {strip_prefix!r}")
        if not path or path.startswith(("/", "*", " ")) or ".." in path.split("/"):
            # a leading '*' or space would be read as a mode marker next time
            raise ManifestFormatError(f"unusable path {path!r}", lineno)
        if path in entries:
            raise ManifestFormatError(f"duplicate path {path!r} after normalization", lineno)
        entries[path] = digest

    order = list(entries)
    if order != sorted(order, key=_sort_key):
        log.append("sorted entries by path")
    return ChecksumManifest(conventions.get("root", ""), list(entries.items()), normalization_log=log)


def _clear_dir(path: Path) -> None:
    for child in path.iterdir():
        if child.is_dir() and not child.is_symlink():
            shutil.rmtree(child)
        else:
            child.unlink()


def bag_pack(root, bag_destination, *, workers: int = 1) -> Path:
    """Copy ``root`` into a new BagIt bag at ``bag_destination``.

    On failure whatever was built is removed; the destination is left as
    it was found (absent or empty).
    """
    root = Path(root)
    dest = Path(bag_destination)
    if not root.is_dir():
        raise BagError(f"{root} is not a directory")
    existed = dest.exists()
    if existed and (not dest.is_dir() or any(dest.iterdir())):
        raise BagError(f"bag destination {dest} is not empty")
    dest_resolved = dest.resolve()
    if dest_resolved == root.resolve() or root.resolve() in dest_resolved.parents:
        raise BagError("bag destination must lie outside the payload root")
    try:
        dest.mkdir(parents=True, exist_ok=True)
        data = dest / "data"
        data.mkdir()
        rels = iter_files(root, exclude=())
        for rel in rels:
            target = data / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(root / rel, target)
        manifest = manifest_create(data, exclude=(), workers=workers)
        manifest.write(dest / MANIFEST_NAME, prefix="data/")
        with open(dest / "bagit.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(BAGIT_DECLARATION)
    except BaseException as exc:
        if dest.exists():
            if existed:
                _clear_dir(dest)
            else:
                shutil.rmtree(dest)
        if isinstance(exc, OSError):
            raise BagError(f"payload copy failed: {exc}") from exc
        raise
    return dest


def is_bag(path) -> bool:
    path = Path(path)
    return (path / "bagit.txt").is_file() and (path / MANIFEST_NAME).is_file()


def load_bag_manifest(bag) -> ChecksumManifest:
    bag = Path(bag)
    manifest = ChecksumManifest.load(bag / MANIFEST_NAME)
    for p in manifest.paths:
        if not p.startswith("data/"):
            raise BagError(f"bag manifest path {p!r} lies outside data/")
    return manifest


def bag_verify(bag, *, workers: int = 1) -> VerificationReport:
    """Verify a bag's payload; files under ``data/`` missing from the manifest are extra."""
    bag = Path(bag)
    if not is_bag(bag):
        raise BagError(f"{bag} is not a bag (bagit.txt or {MANIFEST_NAME} missing)")
    manifest = load_bag_manifest(bag)
    report = manifest_verify(manifest, bag, exclude=(), workers=workers)
    report.extra = [p for p in report.extra if p.startswith("data/")]
    return report
