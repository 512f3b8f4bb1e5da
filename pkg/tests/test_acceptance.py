"""Exit criteria. Each test carries an ``acceptance`` marker naming its criterion;
the terminal summary prints one PASS/FAIL line per criterion."""
from __future__ import annotations

import contextlib
import csv
import datetime as dt
import io
import json
import random
import time
import wave
from collections import Counter
from pathlib import Path

import pytest

from carrierforge.classify import CarrierClass, classify
from carrierforge.cli import main
from carrierforge.errors import IllegalTransition
from carrierforge.fixity import MANIFEST_NAME, ChecksumManifest, manifest_create, manifest_normalize
from carrierforge.forge import ForgeSpec, TrackSpec, corpus_specs, forge, load_specs
from carrierforge.ledger import (
    Batch, Ledger, Period, RobotOrder, StabilizationEvent, Status, person_years, processing_order,
    throughput_stats,
)
from carrierforge.pipeline import MANUAL_MARKER, MANUAL_PREFIX
from carrierforge.sectors import SectorMode

from conftest import FIXTURES, tree_digests

C1 = "1. round-trip fidelity over the forge corpus"
C2 = "2. fixity sensitivity to single-bit corruption"
C3 = "3. malformed-audio handling"
C4 = "4. status machine"
C5 = "5. robot ordering"
C6 = "6. published throughput and staffing arithmetic"
C7 = "7. manifest canonical form"
C8 = "8. parallel determinism"

ISO_KINDS = {CarrierClass.ISO_DATA_DISK, CarrierClass.UDF_DATA_DISK, CarrierClass.DVD_VIDEO}
MANUAL_KINDS = {CarrierClass.HFS_PLUS, CarrierClass.MDS_OPAQUE, CarrierClass.UNKNOWN}


def _cd_wav(pcm: bytes) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(44100)
        w.writeframes(pcm)
    return buf.getvalue()


def expected_files(art) -> dict[str, bytes | None]:
    """Every file the carrier's stabilized output must hold, from forge ground truth.

    ``None`` stands for the manual-handling marker, whose text is free-form.
    """
    c = art.spec.label
    out: dict[str, bytes | None] = {f"masters/{c}/{n}": d for n, d in art.files.items()}
    if art.cue_text is not None:
        out[f"masters/{c}/{art.cue_name}"] = art.cue_text.encode("utf-8")
    if art.kind in ISO_KINDS:
        out.update({f"derived/{c}/files/{p}": d for p, d in art.tree.items()})
    elif art.kind in MANUAL_KINDS:
        out[f"derived/{c}/{MANUAL_MARKER}"] = None
    else:
        for n, (t, payload) in enumerate(zip(art.spec.tracks, art.track_payloads), start=1):
            if t.mode.is_audio:
                out[f"derived/{c}/track{n:02d}.wav"] = payload if t.content == "wav" else _cd_wav(payload)
            elif t.content == "iso":
                out.update({f"derived/{c}/track{n:02d}/{p}": d for p, d in art.tree.items()})
    return out


def _write_batch(root: Path, specs, ledger_dir: Path, name="batch.csv") -> tuple[Path, dict]:
    arts = {}
    rows = []
    ledger = Ledger(ledger_dir)
    with ledger.locked():
        for spec in specs:
            art = forge(spec)
            image, cue = art.write(root / "fixtures" / spec.label)
            arts[spec.label] = (art, cue or image)
            ledger.register_carrier(spec.label, spec.label)
            rows.append([spec.label, image.relative_to(root).as_posix(), cue.relative_to(root).as_posix() if cue else ""])
    path = root / name
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([["carrier_id", "image_path", "cue_path"], *rows])
    return path, arts


def _run_json(capsys, argv) -> tuple[int, object]:
    capsys.readouterr()
    code = main([*argv, "--json"])
    captured = capsys.readouterr()
    assert captured.out, captured.err
    return code, json.loads(captured.out)


@pytest.fixture(scope="module")
def stabilized_corpus(tmp_path_factory):
    """The checked-in corpus taken through identify, stabilize and verify via the CLI."""
    root = tmp_path_factory.mktemp("corpus")
    specs = load_specs(FIXTURES / "corpus.json")
    batch, arts = _write_batch(root, specs, root / "ledger")
    buf = io.StringIO()
    started = time.monotonic()
    with contextlib.redirect_stdout(buf):
        id_code = main(["identify", "--json", *(str(p) for _, p in arts.values())])
    identified = json.loads(buf.getvalue())
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        st_code = main(["stabilize", str(batch), "--json", "--ledger-dir", str(root / "ledger"),
                        "--output-root", str(root / "out"), "--batch-size-limit", "1000"])
    stabilized = json.loads(buf.getvalue())
    with contextlib.redirect_stdout(io.StringIO()):
        verify_codes = {label: main(["verify", str(root / "out" / label), "--workers", "1"]) for label in arts}
    elapsed = time.monotonic() - started
    return {"root": root, "specs": specs, "arts": arts, "identify": (id_code, identified),
            "stabilize": (st_code, stabilized), "verify": verify_codes, "elapsed": elapsed}


@pytest.mark.acceptance(C1)
def test_round_trip_fidelity(stabilized_corpus):
    specs, arts = stabilized_corpus["specs"], stabilized_corpus["arts"]
    assert len(specs) >= 200 and {s.kind for s in specs} == set(CarrierClass)
    sizes = {v for s in specs if s.tree for v in s.tree.values() if isinstance(v, int)}
    assert {0, 1, 2047, 2048, 2049} <= sizes
    assert {len(s.tracks) for s in specs if s.tracks} == {1, 2, 3, 4, 5}

    id_code, identified = stabilized_corpus["identify"]
    st_code, stabilized = stabilized_corpus["stabilize"]
    assert id_code == 0 and st_code == 0
    confusion = Counter()
    for spec, row, result in zip(specs, identified, stabilized["carriers"]):
        assert result["carrier_id"] == spec.label and result["error"] is None
        assert row["class"] == result["class"]
        confusion[(spec.kind.value, result["class"])] += 1
    assert all(truth == got for truth, got in confusion), sorted(k for k in confusion if k[0] != k[1])
    assert sum(confusion.values()) == len(specs)

    out = stabilized_corpus["root"] / "out"
    for label, (art, _) in arts.items():
        project = out / label
        want = expected_files(art)
        got = {rel: d for rel, d in tree_digests(project).items()
               if d != "<dir>" and rel.split("/")[0] in ("masters", "derived")}
        assert set(got) == set(want), label
        for rel, data in want.items():
            actual = (project / rel).read_bytes()
            if data is None:
                assert actual.startswith(MANUAL_PREFIX.encode()), rel
            else:
                assert actual == data, rel
    assert set(stabilized_corpus["verify"].values()) == {0}
    assert stabilized_corpus["elapsed"] < 60, stabilized_corpus["elapsed"]
    print(f"{C1}: {len(specs)} carriers in {stabilized_corpus['elapsed']:.1f}s")


@pytest.mark.acceptance(C2)
def test_fixity_sensitivity(stabilized_corpus, capsys):
    out = stabilized_corpus["root"] / "out"
    rng = random.Random(2016)
    flips = 0
    for label in stabilized_corpus["arts"]:
        project = out / label
        files = sorted(p for p in project.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
        sizes = [p.stat().st_size for p in files]
        candidates = [(p, s) for p, s in zip(files, sizes) if s]
        weights = [s for _, s in candidates]
        for _ in range(100):
            # half the flips favour large files, half treat every file alike so cues and sidecars get hit
            path, size = rng.choices(candidates, weights if rng.random() < 0.5 else None)[0]
            offset, bit = rng.randrange(size), rng.randrange(8)
            original = path.read_bytes()
            data = bytearray(original)
            data[offset] ^= 1 << bit
            path.write_bytes(bytes(data))
            try:
                code, report = _run_json(capsys, ["verify", str(project), "--workers", "1"])
            finally:
                path.write_bytes(original)
            rel = path.relative_to(project).as_posix()
            assert code == 1, (label, rel, offset, bit)
            assert [m["path"] for m in report["mismatched"]] == [rel]
            assert report["missing"] == [] and report["extra"] == []
            flips += 1
        # no false positives once every flip is undone
        code, report = _run_json(capsys, ["verify", str(project), "--workers", "1"])
        assert code == 0 and report["clean"]
    assert flips == 100 * len(stabilized_corpus["arts"])


@pytest.mark.acceptance(C3)
def test_malformed_audio(tmp_path, capsys):
    spec = ForgeSpec(CarrierClass.MALFORMED_AUDIO_WAV, "MW", tracks=(
        TrackSpec(SectorMode.AUDIO_2352, 3, "wav"), TrackSpec(SectorMode.AUDIO_2352, 4, "wav"),
        TrackSpec(SectorMode.AUDIO_2352, 2, "wav")))
    batch, arts = _write_batch(tmp_path, [spec], tmp_path / "L")
    code, result = _run_json(capsys, ["stabilize", str(batch), "--ledger-dir", str(tmp_path / "L"),
                                      "--output-root", str(tmp_path / "out")])
    assert code == 0 and result["carriers"][0]["class"] == "MalformedAudioWav"
    art = arts["MW"][0]
    for n, payload in enumerate(art.track_payloads, start=1):
        got = (tmp_path / f"out/MW/derived/MW/track{n:02d}.wav").read_bytes()
        assert got == payload
        assert got.count(b"RIFF") == 1 and got.count(b"WAVE") == 1

    files = dict(art.files)
    image = bytearray(files[art.image_name])
    for offset in (0, len(art.track_payloads[0]), len(art.track_payloads[0]) + len(art.track_payloads[1])):
        assert image[offset:offset + 4] == b"RIFF"
        image[offset] ^= 0x01
    files[art.image_name] = bytes(image)
    assert classify(files[art.image_name], art.cue, sources=files) is CarrierClass.RED_BOOK_AUDIO

    flipped = tmp_path / "flipped"
    flipped.mkdir()
    (flipped / art.image_name).write_bytes(files[art.image_name])
    (flipped / art.cue_name).write_text(art.cue_text)
    code, rows = _run_json(capsys, ["identify", str(flipped / art.cue_name)])
    assert code == 0 and rows[0]["class"] == "RedBookAudio"


# the machine as documented, written out independently of the implementation
_DOCUMENTED = {
    "NotAttempted": {"OpenFailed", "OpenPartialClone", "ClosedSuccessful", "ClosedFailed"},
    "OpenFailed": {"OpenFailed", "ClosedManualClone", "ClosedFailed"},
    "OpenPartialClone": {"OpenPartialClone", "ClosedPartialClone", "ClosedManualClone", "ClosedFailed"},
    "ClosedSuccessful": set(), "ClosedManualClone": set(), "ClosedPartialClone": set(), "ClosedFailed": set(),
}


def _documented_legal(seq: list[str]) -> bool:
    current = "NotAttempted"
    for s in seq:
        if s not in _DOCUMENTED[current]:
            return False
        current = s
    return True


def _random_sequence(rng: random.Random) -> list[str]:
    names = list(_DOCUMENTED)
    if rng.random() < 0.5:
        return [rng.choice(names) for _ in range(rng.randint(0, 6))]
    # a legal walk, sometimes with one step replaced
    seq, current = [], "NotAttempted"
    for _ in range(rng.randint(0, 6)):
        if not _DOCUMENTED[current]:
            break
        current = rng.choice(sorted(_DOCUMENTED[current]))
        seq.append(current)
    if seq and rng.random() < 0.5:
        seq[rng.randrange(len(seq))] = rng.choice(names)
    return seq


@pytest.mark.acceptance(C4)
def test_status_machine(tmp_path):
    rng = random.Random(4)
    seen = Counter()
    legal_count = 0
    for chunk in range(10):
        ledger = Ledger(tmp_path / f"ledger{chunk}")
        with ledger.locked():
            for i in range(1000):
                seq = _random_sequence(rng)
                cid = ledger.register_carrier("P", f"c{i}").carrier_id
                accepted = True
                for s in seq:
                    try:
                        ledger.record_event(StabilizationEvent(cid, Status(s), output_files=["master.iso"]))
                    except IllegalTransition:
                        accepted = False
                        break
                    seen[s] += 1
                assert accepted == _documented_legal(seq), seq
                legal_count += accepted
    assert 0 < legal_count < 10_000
    seen["NotAttempted"] += 1  # every registered carrier starts there
    assert set(seen) == {s.value for s in Status}
    for closed in (s for s in Status if s.is_closed):
        ledger = Ledger(tmp_path / f"terminal-{closed.value}")
        cid = ledger.register_carrier("P", "x").carrier_id
        path = {"ClosedManualClone": ["OpenFailed"], "ClosedPartialClone": ["OpenPartialClone"]}.get(closed.value, [])
        for s in [*path, closed.value]:
            ledger.record_event(StabilizationEvent(cid, Status(s), output_files=["master.iso"]))
        for nxt in Status:
            with pytest.raises(IllegalTransition):
                ledger.record_event(StabilizationEvent(cid, nxt, output_files=["master.iso"]))


@pytest.mark.acceptance(C5)
def test_ordering():
    assert processing_order(Batch("b", ["A", "B", "C"], RobotOrder.FIFO)) == ["A", "B", "C"]
    assert processing_order(Batch("b", ["A", "B", "C"], RobotOrder.LIFO)) == ["C", "B", "A"]
    rng = random.Random(5)
    for n in range(1, 101):
        ids = [f"id{rng.randrange(10**6)}-{k}" for k in range(n)]
        once = processing_order(Batch("b", ids, RobotOrder.LIFO, size_limit=100))
        assert processing_order(Batch("b", once, RobotOrder.LIFO, size_limit=100)) == ids
        assert processing_order(Batch("b", ids, RobotOrder.FIFO, size_limit=100)) == ids


@pytest.mark.acceptance(C6)
def test_published_arithmetic():
    total = 2_200_000_000_000
    share, rest = divmod(total, 1050)
    start = dt.datetime(2016, 3, 1, tzinfo=dt.timezone.utc)
    events = [
        StabilizationEvent(f"c{i}", Status.CLOSED_SUCCESSFUL, output_files=["x.iso"],
                           output_bytes=share + (1 if i < rest else 0),
                           occurred_at=start + dt.timedelta(minutes=40 * i))
        for i in range(1050)
    ]
    stats = throughput_stats(events, Period.month(2016, 3))
    assert stats.carriers_per_month == 1050
    assert stats.bytes_per_month == total
    assert abs(stats.avg_bytes_per_carrier - 2.095e9) / 2.095e9 < 1e-3
    assert person_years(100e12, 20e12) == 5


def _adversarial_manifest(rng: random.Random) -> str:
    lines = []
    used = set()
    for _ in range(rng.randint(1, 12)):
        parts = ["".join(rng.choice("abcXYZ019_-é ü") for _ in range(rng.randint(1, 6))).strip() or "f"
                 for _ in range(rng.randint(1, 3))]
        path = "/".join(parts)
        if path in used:
            continue
        used.add(path)
        digest = rng.randbytes(32).hex()
        digest = digest.upper() if rng.random() < 0.4 else digest
        shown = path.replace("/", "\\") if rng.random() < 0.4 else path
        shown = "./" + shown if rng.random() < 0.2 else shown
        line = rng.choice([
            f"{digest} {shown}", f"{digest} *{shown}", f"{digest}  {shown}", f"{digest}\t{shown}",
            f"SHA256 ({shown}) = {digest}",
        ])
        lines.append(line + rng.choice(["\n", "\r\n"]))
    return "".join(lines)


@pytest.mark.acceptance(C7)
def test_manifest_canonical_form(stabilized_corpus, tmp_path, capsys):
    rng = random.Random(7)
    for _ in range(50):
        text = _adversarial_manifest(rng)
        once = manifest_normalize(text)
        twice = manifest_normalize(once.serialize())
        assert twice == once and twice.normalization_log == []
        assert ChecksumManifest.parse(once.serialize()) == once
        assert once.serialize().encode() == twice.serialize().encode()
    # binary-mode markers and mixed separators collapse to the same entry
    digest = rng.randbytes(32).hex()
    assert manifest_normalize(f"{digest.upper()} *a\\b\r\n").serialize() == f"{digest} a/b\n"

    project = stabilized_corpus["root"] / "out" / "C0000"
    assert main(["bag", str(project), str(tmp_path / "bag")]) == 0
    code, report = _run_json(capsys, ["verify", str(tmp_path / "bag")])
    assert code == 0 and report["kind"] == "bag" and report["clean"]

    first = manifest_create(project).write(tmp_path / "m1").read_bytes()
    second = manifest_create(project, workers=3).write(tmp_path / "m2").read_bytes()
    assert first == second == (project / MANIFEST_NAME).read_bytes()


@pytest.mark.acceptance(C8)
def test_parallel_determinism(tmp_path, capsys):
    specs = corpus_specs(count=36)
    specs.append(ForgeSpec(CarrierClass.ISO_DATA_DISK, "BROKEN", {"A.TIF": 9000}))
    statuses = []
    derived = []
    for workers in (1, 2):
        root = tmp_path / f"w{workers}"
        batch, _ = _write_batch(root, specs, root / "ledger")
        broken = root / "fixtures/BROKEN/BROKEN.iso"
        broken.write_bytes(broken.read_bytes()[:-5000])
        code, result = _run_json(capsys, ["stabilize", str(batch), "--workers", str(workers), "--robot-order",
                                          "lifo", "--batch-size-limit", "100", "--ledger-dir", str(root / "ledger"), "--output-root",
                                          str(root / "out")])
        assert code == 1 and result["workers"] == workers
        digests = {}
        for project in sorted((root / "out").iterdir()):
            for rel, d in tree_digests(project).items():
                if rel.startswith(("derived/", "masters/")):
                    digests[f"{project.name}/{rel}"] = d
        derived.append(digests)
        statuses.append(Counter(e.status for e in Ledger(root / "ledger").events))
    assert derived[0] == derived[1]
    assert statuses[0] == statuses[1]
    assert statuses[0] == Counter({Status.CLOSED_SUCCESSFUL: 36, Status.OPEN_FAILED: 1})
