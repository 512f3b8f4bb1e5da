"""Stabilization metadata ledger.

The ledger directory holds ``events.jsonl``, an append-only log (one JSON
object per line), and the CSV views ``carriers.csv``, ``batches.csv`` and
``stages.csv`` that are rebuilt from it after every write. Writers take an
exclusive lock on the directory; readers just replay the log.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import json
import math
from fractions import Fraction
import os
from collections.abc import Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import filelock

from .errors import IllegalTransition, LedgerError, LedgerLocked, UnknownCarrier

DEFAULT_BATCH_LIMIT = 30
EVENTS_FILE = "events.jsonl"
LOCK_FILE = ".ledger.lock"
CARRIER_COLUMNS = [
    "carrier_id", "project_id", "box_id", "order_in_box", "location",
    "custodian", "status", "disambiguation_suffix",
]


class Location(enum.Enum):
    SHELF = "Shelf"
    STABILIZATION_STATION = "StabilizationStation"
    FAILURE_INVESTIGATION = "FailureInvestigation"
    WITH_CURATOR = "WithCurator"


class Status(enum.Enum):
    NOT_ATTEMPTED = "NotAttempted"
    OPEN_FAILED = "OpenFailed"
    OPEN_PARTIAL_CLONE = "OpenPartialClone"
    CLOSED_SUCCESSFUL = "ClosedSuccessful"
    CLOSED_MANUAL_CLONE = "ClosedManualClone"
    CLOSED_PARTIAL_CLONE = "ClosedPartialClone"
    CLOSED_FAILED = "ClosedFailed"

    @property
    def is_closed(self) -> bool:
        return self.value.startswith("Closed")

    @property
    def is_open(self) -> bool:
        return self.value.startswith("Open")


TRANSITIONS: dict[Status, frozenset[Status]] = {
    Status.NOT_ATTEMPTED: frozenset({
        Status.OPEN_FAILED, Status.OPEN_PARTIAL_CLONE, Status.CLOSED_SUCCESSFUL, Status.CLOSED_FAILED,
    }),
    Status.OPEN_FAILED: frozenset({Status.OPEN_FAILED, Status.CLOSED_MANUAL_CLONE, Status.CLOSED_FAILED}),
    Status.OPEN_PARTIAL_CLONE: frozenset({
        Status.OPEN_PARTIAL_CLONE, Status.CLOSED_PARTIAL_CLONE, Status.CLOSED_MANUAL_CLONE, Status.CLOSED_FAILED,
    }),
    Status.CLOSED_SUCCESSFUL: frozenset(),
    Status.CLOSED_MANUAL_CLONE: frozenset(),
    Status.CLOSED_PARTIAL_CLONE: frozenset(),
    Status.CLOSED_FAILED: frozenset(),
}


def is_legal(current: Status, new: Status) -> bool:
    return new in TRANSITIONS[current]


def is_legal_sequence(statuses: Iterable[Status]) -> bool:
    """Whether a carrier starting at NotAttempted may pass through ``statuses`` in order."""
    current = Status.NOT_ATTEMPTED
    for s in statuses:
        if not is_legal(current, s):
            return False
        current = s
    return True


class RobotOrder(enum.Enum):
    FIFO = "Fifo"
    LIFO = "Lifo"


class Stage(enum.Enum):
    SELECTED = "Selected"
    STABILIZED = "Stabilized"
    CLEANED_UP = "CleanedUp"
    EXTRACTED = "Extracted"
    CURATED = "Curated"
    SERVICE_COPIES = "ServiceCopies"

    @property
    def index(self) -> int:
        return list(Stage).index(self)


def _now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


def _ts(value: dt.datetime | None) -> str | None:
    return value.isoformat() if value else None


def _parse_ts(value: str | None) -> dt.datetime | None:
    return dt.datetime.fromisoformat(value) if value else None


@dataclass
class CarrierRecord:
    carrier_id: str
    project_id: str
    box_id: str | None = None
    order_in_box: int | None = None
    location: Location = Location.SHELF
    custodian: str = ""
    primary_metadata_ref: str = ""
    disambiguation_suffix: str | None = None
    status: Status = Status.NOT_ATTEMPTED

    def to_dict(self) -> dict:
        d = asdict(self)
        d["location"] = self.location.value
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> CarrierRecord:
        d = dict(d)
        d["location"] = Location(d.get("location", Location.SHELF.value))
        d["status"] = Status(d.get("status", Status.NOT_ATTEMPTED.value))
        return cls(**d)


@dataclass
class StabilizationEvent:
    carrier_id: str
    status: Status
    occurred_at: dt.datetime | None = None
    operator: str = ""
    software: str = ""
    hardware: str = ""
    output_files: list[str] = field(default_factory=list)
    output_extensions: list[str] = field(default_factory=list)
    attempt_number: int | None = None
    run_seconds: float | None = None
    batch_id: str = ""
    comments: str = ""
    output_bytes: int | None = None
    carrier_class: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        d["occurred_at"] = _ts(self.occurred_at)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> StabilizationEvent:
        d = dict(d)
        d["status"] = Status(d["status"])
        d["occurred_at"] = _parse_ts(d.get("occurred_at"))
        return cls(**d)


@dataclass
class Batch:
    batch_id: str
    carrier_ids: list[str]
    robot_order: RobotOrder = RobotOrder.FIFO
    size_limit: int = DEFAULT_BATCH_LIMIT
    closed: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["robot_order"] = self.robot_order.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> Batch:
        d = dict(d)
        d["robot_order"] = RobotOrder(d["robot_order"])
        return cls(**d)


@dataclass(frozen=True)
class ProjectStage:
    project_id: str
    stage: Stage
    recorded_at: dt.datetime
    tooling: str = ""

    def to_dict(self) -> dict:
        return {"project_id": self.project_id, "stage": self.stage.value,
                "recorded_at": _ts(self.recorded_at), "tooling": self.tooling}


def processing_order(batch: Batch) -> list[str]:
    """The order a robot hands carriers to the drive: load order, or reversed for LIFO."""
    if not batch.carrier_ids:
        raise LedgerError(f"batch {batch.batch_id!r} is empty")
    if batch.robot_order is RobotOrder.LIFO:
        return list(reversed(batch.carrier_ids))
    return list(batch.carrier_ids)


# ---------------------------------------------------------------------------
# prioritisation and statistics


@dataclass(frozen=True)
class Candidate:
    carrier_id: str
    age_years: float
    expected_bytes: float
    demand_score: float


@dataclass(frozen=True)
class RankedCandidate:
    carrier_id: str
    score: float


DEFAULT_WEIGHTS = {"risk": 1 / 3, "gain": 1 / 3, "demand": 1 / 3}


def select_candidates(carriers: Sequence[Candidate], policy_weights: Mapping[str, float] | None = None) -> list[RankedCandidate]:
    """Rank carriers by a weighted mix of age (risk), size (gain) and demand.

    Age and size are scaled by their maxima over the candidate set, so
    rescaling all byte counts leaves the ranking unchanged. Ties go to the
    smaller carrier id.
    """
    weights = dict(DEFAULT_WEIGHTS if policy_weights is None else policy_weights)
    unknown = set(weights) - set(DEFAULT_WEIGHTS)
    if unknown:
        raise LedgerError(f"unknown weight names: {sorted(unknown)}")
    w = {k: float(weights.get(k, 0.0)) for k in DEFAULT_WEIGHTS}
    if any(v < 0 for v in w.values()):
        raise LedgerError("weights must be non-negative")
    if abs(sum(w.values()) - 1.0) > 1e-9:
        raise LedgerError(f"weights must sum to 1 (got {sum(w.values())!r})")
    if len({c.carrier_id for c in carriers}) != len(carriers):
        raise LedgerError("duplicate carrier ids among candidates")
    for c in carriers:
        if c.age_years < 0 or c.expected_bytes < 0 or c.demand_score < 0:
            raise LedgerError(f"{c.carrier_id}: negative input")
        if c.demand_score > 1:
            raise LedgerError(f"{c.carrier_id}: demand_score must lie in [0, 1]")
    max_age = Fraction(max((c.age_years for c in carriers), default=0) or 1)
    max_bytes = Fraction(max((c.expected_bytes for c in carriers), default=0) or 1)
    wr, wg, wd = (Fraction(w[k]) for k in ("risk", "gain", "demand"))
    # exact rational scores so the ranking is invariant under exact rescaling
    exact = {
        c.carrier_id: wr * Fraction(c.age_years) / max_age
        + wg * Fraction(c.expected_bytes) / max_bytes + wd * Fraction(c.demand_score)
        for c in carriers
    }
    order = sorted(exact, key=lambda cid: (-exact[cid], cid))
    return [RankedCandidate(cid, float(exact[cid])) for cid in order]


AVERAGE_MONTH_DAYS = 365.2425 / 12


@dataclass(frozen=True)
class Period:
    start: dt.datetime
    end: dt.datetime
    months: float | None = None

    @classmethod
    def month(cls, year: int, month: int) -> Period:
        start = dt.datetime(year, month, 1, tzinfo=dt.timezone.utc)
        end = dt.datetime(year + month // 12, month % 12 + 1, 1, tzinfo=dt.timezone.utc)
        return cls(start, end, 1.0)

    @property
    def length_months(self) -> float:
        if self.months is not None:
            return self.months
        return (self.end - self.start).total_seconds() / 86400 / AVERAGE_MONTH_DAYS

    def __contains__(self, when: dt.datetime) -> bool:
        return self.start <= when < self.end


@dataclass(frozen=True)
class ThroughputStats:
    carriers_per_month: float
    bytes_per_month: float
    avg_bytes_per_carrier: float | None


def throughput_stats(events: Iterable[StabilizationEvent], period: Period) -> ThroughputStats:
    if period.end <= period.start or period.length_months <= 0:
        raise LedgerError("empty period")
    done = [
        e for e in events
        if e.status is Status.CLOSED_SUCCESSFUL and e.occurred_at is not None and e.occurred_at in period
    ]
    months = period.length_months
    total = math.fsum(e.output_bytes or 0 for e in done)
    avg = total / len(done) if done else None
    return ThroughputStats(len(done) / months, total / months, avg)


def person_years(total_bytes: float, bytes_per_person_year: float) -> float:
    """Staff effort to stabilize ``total_bytes`` at a per-person annual rate."""
    if bytes_per_person_year <= 0:
        raise LedgerError("rate must be positive")
    return total_bytes / bytes_per_person_year


# ---------------------------------------------------------------------------
# persistent ledger


class Ledger:
    def __init__(self, directory, *, lock_timeout: float = 10.0, create: bool = True):
        self.directory = Path(directory)
        if create:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.events_path = self.directory / EVENTS_FILE
        self._lock = filelock.FileLock(str(self.directory / LOCK_FILE), timeout=lock_timeout)
        self._loaded_size = -1
        self._dirty = False
        self._reset()
        self._reload()

    # -- state ---------------------------------------------------------------

    def _reset(self) -> None:
        self.carriers: dict[str, CarrierRecord] = {}
        self.events: list[StabilizationEvent] = []
        self.batches: dict[str, Batch] = {}
        self.stages: list[ProjectStage] = []
        self.duplicate_events: list[dict] = []
        self._seq = 0

    def _reload(self) -> None:
        size = self.events_path.stat().st_size if self.events_path.exists() else 0
        if size == self._loaded_size:
            return
        self._reset()
        if size:
            with open(self.events_path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        self._apply(json.loads(line))
                    except (ValueError, KeyError, TypeError) as exc:
                        raise LedgerError(f"{self.events_path}:{lineno}: corrupt record ({exc})") from exc
        self._loaded_size = size

    def _apply(self, rec: Mapping) -> None:
        self._seq = rec["seq"]
        kind = rec["type"]
        if kind == "carrier_registered":
            c = CarrierRecord.from_dict(rec["carrier"])
            self.carriers[c.carrier_id] = c
        elif kind == "duplicate_naming":
            self.duplicate_events.append(dict(rec))
        elif kind == "stabilization":
            e = StabilizationEvent.from_dict(rec["event"])
            self.events.append(e)
            c = self.carriers[e.carrier_id]
            c.status = e.status
            if e.status.is_open:
                c.location = Location.FAILURE_INVESTIGATION
        elif kind == "location_changed":
            self.carriers[rec["carrier_id"]].location = Location(rec["location"])
        elif kind == "batch_opened":
            b = Batch.from_dict(rec["batch"])
            self.batches[b.batch_id] = b
        elif kind == "batch_closed":
            self.batches[rec["batch_id"]].closed = True
        elif kind == "stage_recorded":
            self.stages.append(ProjectStage(
                rec["project_id"], Stage(rec["stage"]), _parse_ts(rec["recorded_at"]), rec.get("tooling", ""),
            ))
        else:
            raise ValueError(f"unknown record type {kind!r}")

    @contextmanager
    def locked(self) -> Iterator[Ledger]:
        """Hold the writer lock; re-entrant. Views are rebuilt when the outermost hold ends."""
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            self._lock.acquire()
        except filelock.Timeout:
            raise LedgerLocked(f"ledger {self.directory} is locked by another writer") from None
        try:
            self._reload()
            yield self
        finally:
            try:
                if self._lock.lock_counter == 1 and self._dirty:
                    self.write_views()
                    self._dirty = False
            finally:
                self._lock.release()

    def _append(self, *records: dict) -> None:
        lines = []
        for rec in records:
            self._seq += 1
            full = {"seq": self._seq, "type": rec.pop("type"), "recorded_at": _ts(_now()), **rec}
            self._apply(full)
            lines.append(json.dumps(full, ensure_ascii=False, sort_keys=True) + "\n")
        with open(self.events_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
            fh.flush()
            os.fsync(fh.fileno())
        self._loaded_size = self.events_path.stat().st_size
        self._dirty = True

    # -- queries -------------------------------------------------------------

    def carrier(self, carrier_id: str) -> CarrierRecord:
        self._reload()
        try:
            return self.carriers[carrier_id]
        except KeyError:
            raise UnknownCarrier(carrier_id) from None

    def events_for(self, carrier_id: str) -> list[StabilizationEvent]:
        self.carrier(carrier_id)
        return [e for e in self.events if e.carrier_id == carrier_id]

    def current_stage(self, project_id: str) -> Stage | None:
        mine = [s for s in self.stages if s.project_id == project_id]
        return mine[-1].stage if mine else None

    # -- mutations -----------------------------------------------------------

    def register_carrier(self, project_id: str, proposed_id: str, *, box_id: str | None = None,
                         order_in_box: int | None = None, custodian: str = "",
                         primary_metadata_ref: str = "", location: Location = Location.SHELF) -> CarrierRecord:
        """Register a carrier. A reused identifier gets a ``#N`` suffix and a duplicate-naming event."""
        if not proposed_id or not proposed_id.strip():
            raise LedgerError("carrier identifier must not be empty")
        if not project_id:
            raise LedgerError("project identifier must not be empty")
        with self.locked():
            carrier_id, suffix = proposed_id, None
            if proposed_id in self.carriers:
                n = 2
                while f"{proposed_id}#{n}" in self.carriers:
                    n += 1
                suffix = f"#{n}"
                carrier_id = proposed_id + suffix
            record = CarrierRecord(carrier_id, project_id, box_id, order_in_box, location,
                                   custodian, primary_metadata_ref, suffix)
            records = []
            if suffix:
                records.append({"type": "duplicate_naming", "project_id": project_id,
                                "proposed_id": proposed_id, "assigned_id": carrier_id})
            records.append({"type": "carrier_registered", "carrier": record.to_dict()})
            self._append(*records)
            return self.carriers[carrier_id]

    def record_event(self, event: StabilizationEvent) -> Status:
        with self.locked():
            carrier = self.carrier(event.carrier_id)
            if not is_legal(carrier.status, event.status):
                raise IllegalTransition(
                    f"{event.carrier_id}: {carrier.status.value} -> {event.status.value} is not allowed"
                )
            if event.status is Status.CLOSED_SUCCESSFUL and not event.output_files:
                raise LedgerError(f"{event.carrier_id}: ClosedSuccessful needs output files")
            expected_attempt = len(self.events_for(event.carrier_id)) + 1
            if event.attempt_number is None:
                event.attempt_number = expected_attempt
            elif event.attempt_number != expected_attempt:
                raise LedgerError(
                    f"{event.carrier_id}: attempt {event.attempt_number} out of sequence (expected {expected_attempt})"
                )
            if event.occurred_at is None:
                event.occurred_at = _now()
            if not event.output_extensions:
                event.output_extensions = sorted({Path(f).suffix for f in event.output_files if Path(f).suffix})
            self._append({"type": "stabilization", "event": event.to_dict()})
            return self.carriers[event.carrier_id].status

    def set_location(self, carrier_id: str, location: Location) -> None:
        with self.locked():
            self.carrier(carrier_id)
            self._append({"type": "location_changed", "carrier_id": carrier_id, "location": location.value})

    def open_batch(self, batch_id: str, carrier_ids: Sequence[str], robot_order: RobotOrder = RobotOrder.FIFO,
                   size_limit: int = DEFAULT_BATCH_LIMIT) -> Batch:
        if size_limit < 1:
            raise LedgerError("batch size limit must be positive")
        if not carrier_ids:
            raise LedgerError("batch must hold at least one carrier")
        if len(carrier_ids) > size_limit:
            raise LedgerError(f"batch of {len(carrier_ids)} carriers exceeds limit {size_limit}")
        if len(set(carrier_ids)) != len(carrier_ids):
            raise LedgerError("carrier listed twice in one batch")
        with self.locked():
            if batch_id in self.batches:
                raise LedgerError(f"batch {batch_id!r} already exists")
            for cid in carrier_ids:
                self.carrier(cid)
                for b in self.batches.values():
                    if not b.closed and cid in b.carrier_ids:
                        raise LedgerError(f"{cid} is already in open batch {b.batch_id!r}")
            batch = Batch(batch_id, list(carrier_ids), robot_order, size_limit)
            self._append({"type": "batch_opened", "batch": batch.to_dict()})
            return self.batches[batch_id]

    def close_batch(self, batch_id: str) -> None:
        with self.locked():
            if batch_id not in self.batches:
                raise LedgerError(f"unknown batch {batch_id!r}")
            if not self.batches[batch_id].closed:
                self._append({"type": "batch_closed", "batch_id": batch_id})

    def advance_stage(self, project_id: str, stage: Stage, tooling: str = "") -> ProjectStage:
        """Record a project stage: the current one again, or its immediate successor."""
        with self.locked():
            current = self.current_stage(project_id)
            allowed = {Stage.SELECTED} if current is None else {current}
            if current is not None and current.index + 1 < len(Stage):
                allowed.add(list(Stage)[current.index + 1])
            if stage not in allowed:
                raise LedgerError(
                    f"{project_id}: cannot go from {current.value if current else 'nothing'} to {stage.value}"
                )
            self._append({"type": "stage_recorded", "project_id": project_id,
                          "stage": stage.value, "recorded_at": _ts(_now()), "tooling": tooling})
            return self.stages[-1]

    # -- views ---------------------------------------------------------------

    def write_views(self) -> None:
        def write(name: str, header: list[str], rows: Iterable[list]) -> None:
            tmp = self.directory / (name + ".tmp")
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\r\n")
                w.writerow(header)
                w.writerows(rows)
            os.replace(tmp, self.directory / name)

        write("carriers.csv", CARRIER_COLUMNS, (
            [c.carrier_id, c.project_id, c.box_id or "", "" if c.order_in_box is None else c.order_in_box,
             c.location.value, c.custodian, c.status.value, c.disambiguation_suffix or ""]
            for c in self.carriers.values()
        ))
        write("batches.csv", ["batch_id", "robot_order", "size_limit", "state", "carrier_ids"], (
            [b.batch_id, b.robot_order.value, b.size_limit, "closed" if b.closed else "open",
             ";".join(b.carrier_ids)]
            for b in self.batches.values()
        ))
        write("stages.csv", ["project_id", "stage", "recorded_at", "tooling"], (
            [s.project_id, s.stage.value, _ts(s.recorded_at), s.tooling] for s in self.stages
        ))
