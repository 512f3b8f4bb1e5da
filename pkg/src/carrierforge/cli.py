"""Command line interface.

Exit codes: 0 success, 1 content or fixity failure, 2 usage or ledger error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .classify import classify, data_payload, plan_for
from .detect import detect_all, detect_dvd_video
from .errors import (
    BagError, CarrierForgeError, LedgerError, LedgerLocked, ManifestError, MergeConflict, PipelineError,
    UnknownCarrier,
)
from .fixity import MANIFEST_NAME, ChecksumManifest, bag_pack, bag_verify, is_bag, manifest_create, manifest_verify
from .iso import iso_list
from .ledger import (
    DEFAULT_BATCH_LIMIT, Candidate, Ledger, Period, RobotOrder, Stage, StabilizationEvent, Status,
    processing_order, select_candidates, throughput_stats,
)
from .pipeline import CarrierFailed, dedupe, directory_name, merge_batches, run_plan
from .sectors import decode_cue_bytes, parse_cue

EXIT_OK, EXIT_CONTENT, EXIT_USAGE = 0, 1, 2
LEDGER_ENV = "CARRIERFORGE_LEDGER"


class UsageError(CarrierForgeError):
    pass


@dataclass(frozen=True)
class CliConfig:
    ledger_dir: Path
    output_root: Path
    batch_size_limit: int = DEFAULT_BATCH_LIMIT
    parallel_workers: int = 2
    dry_run: bool = False
    json: bool = False
    lock_timeout: float = 10.0

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> CliConfig:
        ledger = os.environ.get(LEDGER_ENV) or getattr(args, "ledger_dir", None) or "ledger"
        workers = getattr(args, "workers", 2)
        limit = getattr(args, "batch_size_limit", DEFAULT_BATCH_LIMIT)
        if workers < 1 or limit < 1:
            raise UsageError("--workers and --batch-size-limit must be positive")
        return cls(
            Path(ledger).resolve(), Path(getattr(args, "output_root", None) or "stabilized").resolve(),
            limit, workers, getattr(args, "dry_run", False), getattr(args, "json", False),
            getattr(args, "lock_timeout", 10.0),
        )


def _emit(cfg: CliConfig, payload, text: str) -> None:
    if cfg.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _table(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# carrier loading


@dataclass
class CarrierInput:
    image_name: str
    image: bytes
    cue: object = None
    cue_name: str | None = None
    cue_text: str | None = None
    sources: dict | None = None


def load_carrier(image_path, cue_path=None) -> CarrierInput:
    """Read an image, or a cue sheet plus every BIN file it names."""
    image_path = Path(image_path)
    if cue_path is None and image_path.suffix.lower() == ".cue":
        cue_path, image_path = image_path, None
    if cue_path is None:
        return CarrierInput(image_path.name, image_path.read_bytes())
    cue_path = Path(cue_path)
    text = decode_cue_bytes(cue_path.read_bytes())
    cue = parse_cue(text)
    sources = {}
    for name in cue.source_files:
        candidate = cue_path.parent / name
        if not candidate.is_file() and image_path is not None and len(cue.source_files) == 1:
            candidate = image_path
        if not candidate.is_file():
            raise PipelineError(f"cue {cue_path.name} names missing file {name!r}")
        sources[name] = candidate.read_bytes()
    first = cue.source_files[0]
    return CarrierInput(Path(first).name, sources[first], cue, cue_path.name, text, sources)


# ---------------------------------------------------------------------------
# identify


def identify_one(path: Path) -> dict:
    carrier = load_carrier(path)
    payload = carrier.image
    if carrier.cue is not None:
        try:
            payload = data_payload(carrier.image, carrier.cue, carrier.sources)
        except CarrierForgeError:
            payload = b""
    families = [v.family.value for v in detect_all(payload)]
    try:
        if detect_dvd_video(iso_list(payload, max_depth=1)):
            families.append("DvdVideo")
    except CarrierForgeError:
        pass
    if carrier.cue is not None:
        families.insert(0, "CueSheet")
    kind = classify(carrier.image, carrier.cue, sources=carrier.sources)
    plan = plan_for(kind)
    return {"path": str(path), "families": families, "class": kind.value,
            "manual": plan.needs_manual, "plan": [s.value for s in plan.steps]}


def cmd_identify(cfg: CliConfig, args) -> int:
    reports, status = [], EXIT_OK
    for p in args.paths:
        try:
            reports.append(identify_one(Path(p)))
        except (OSError, CarrierForgeError) as exc:
            print(f"carrierforge: {p}: {exc}", file=sys.stderr)
            status = EXIT_USAGE
    rows = [[r["path"], ",".join(r["families"]) or "-",
             r["class"] + (" / manual" if r["manual"] else ""), " > ".join(r["plan"])] for r in reports]
    _emit(cfg, reports, _table(rows, ["path", "families", "class", "plan"]))
    return status


# ---------------------------------------------------------------------------
# stabilize


def read_batch_file(path) -> list[tuple[str, Path, Path | None]]:
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not any(c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            if row[0].strip() == "carrier_id":
                continue
            if len(row) < 2 or not row[1].strip():
                raise UsageError(f"{path}: row {row!r} needs carrier_id,image_path[,cue_path]")
            cue = row[2].strip() if len(row) > 2 and row[2].strip() else None
            rows.append((row[0].strip(), path.parent / row[1].strip(), path.parent / cue if cue else None))
    if not rows:
        raise UsageError(f"{path}: batch file lists no carriers")
    return rows


def _stabilize_one(cfg: CliConfig, carrier_id: str, project_id: str, image_path, cue_path) -> dict:
    started = time.monotonic()
    result = {"carrier_id": carrier_id, "project_id": project_id, "class": None, "plan": [],
              "error": None, "masters": [], "derived": [], "notes": [], "master_bytes": 0}
    try:
        carrier = load_carrier(image_path, cue_path)
        kind = classify(carrier.image, carrier.cue, sources=carrier.sources)
        plan = plan_for(kind)
        result["class"], result["plan"] = kind.value, [s.value for s in plan.steps]
        if not cfg.dry_run:
            out = run_plan(
                directory_name(carrier_id), carrier.image, carrier.cue, plan, cfg.output_root,
                project_id=directory_name(project_id),
                image_name=carrier.image_name, sources=carrier.sources,
                cue_name=carrier.cue_name, cue_text=carrier.cue_text,
            )
            project_dir = cfg.output_root / directory_name(project_id)
            result["masters"] = [p.relative_to(project_dir).as_posix() for p in out.master_image_paths]
            result["derived"] = sorted(p.relative_to(project_dir).as_posix() for p in out.derived_paths)
            result["notes"] = out.notes
            result["master_bytes"] = out.master_bytes
    except CarrierFailed as exc:
        result["error"] = str(exc.cause)
        project_dir = cfg.output_root / directory_name(project_id)
        result["masters"] = [p.relative_to(project_dir).as_posix() for p in exc.masters]
        if exc.quarantine:
            result["notes"] = [f"partial output quarantined in {exc.quarantine.relative_to(project_dir).as_posix()}"]
    except (OSError, CarrierForgeError) as exc:
        result["error"] = str(exc)
    result["run_seconds"] = round(time.monotonic() - started, 3)
    return result


def cmd_stabilize(cfg: CliConfig, args) -> int:
    rows = read_batch_file(args.batch_file)
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        raise UsageError("a carrier is listed twice in the batch file")
    if len(rows) > cfg.batch_size_limit:
        raise UsageError(f"batch of {len(rows)} carriers exceeds the limit of {cfg.batch_size_limit}")
    batch_id = args.batch_id or Path(args.batch_file).stem
    order = RobotOrder(args.robot_order.capitalize())
    ledger = Ledger(cfg.ledger_dir, lock_timeout=cfg.lock_timeout, create=not cfg.dry_run)

    def check_carriers() -> dict[str, str]:
        projects = {}
        for cid in ids:
            rec = ledger.carrier(cid)
            if rec.status.is_closed:
                raise UsageError(f"{cid} is already {rec.status.value}")
            projects[cid] = rec.project_id
        return projects

    if cfg.dry_run:
        projects = check_carriers()
        results = [_stabilize_one(cfg, cid, projects[cid], img, cue) for cid, img, cue in rows]
        _emit(cfg, {"batch_id": batch_id, "dry_run": True, "carriers": results},
              _table([[r["carrier_id"], r["class"] or "-", " > ".join(r["plan"])] for r in results],
                     ["carrier", "class", "plan"]))
        return EXIT_OK

    with ledger.locked():
        projects = check_carriers()
        batch = ledger.open_batch(batch_id, ids, order, cfg.batch_size_limit)
        by_id = {r[0]: r for r in rows}
        sequence = processing_order(batch)
        with ThreadPoolExecutor(cfg.parallel_workers) as pool:
            futures = {
                cid: pool.submit(_stabilize_one, cfg, cid, projects[cid], by_id[cid][1], by_id[cid][2])
                for cid in sequence
            }
            results = [futures[cid].result() for cid in sequence]

        manifests = {}
        for project in sorted({projects[c] for c in ids}):
            project_dir = cfg.output_root / directory_name(project)
            if project_dir.is_dir():
                m = manifest_create(project_dir, workers=cfg.parallel_workers)
                manifests[project] = str(m.write(project_dir / MANIFEST_NAME))

        for r in results:
            prior = ledger.carrier(r["carrier_id"]).status
            if r["error"] is None:
                status = Status.CLOSED_SUCCESSFUL if prior is Status.NOT_ATTEMPTED else Status.CLOSED_MANUAL_CLONE
            elif prior is Status.OPEN_PARTIAL_CLONE:
                status = Status.OPEN_PARTIAL_CLONE
            else:
                status = Status.OPEN_FAILED
            outputs = r["masters"] + r["derived"]
            comments = "; ".join(([f"error: {r['error']}"] if r["error"] else []) + r["notes"])
            ledger.record_event(StabilizationEvent(
                r["carrier_id"], status, operator=args.operator,
                software=f"carrierforge {__version__}", hardware=platform.machine() or "unknown",
                output_files=outputs, run_seconds=r["run_seconds"], batch_id=batch_id,
                comments=comments, output_bytes=r["master_bytes"], carrier_class=r["class"],
            ))
            r["status"] = status.value
        ledger.close_batch(batch_id)

    ok = all(r["error"] is None for r in results)
    _emit(
        cfg,
        {"batch_id": batch_id, "dry_run": False, "workers": cfg.parallel_workers,
         "manifests": manifests, "carriers": results},
        _table([[r["carrier_id"], r["class"] or "-", r["status"], r["error"] or ""] for r in results],
               ["carrier", "class", "status", "error"]),
    )
    return EXIT_OK if ok else EXIT_CONTENT


# ---------------------------------------------------------------------------
# fixity commands


def cmd_verify(cfg: CliConfig, args) -> int:
    root = Path(args.root)
    if is_bag(root):
        kind, report = "bag", bag_verify(root, workers=cfg.parallel_workers)
    elif (root / MANIFEST_NAME).is_file():
        kind = "manifest"
        report = manifest_verify(ChecksumManifest.load(root / MANIFEST_NAME), root, workers=cfg.parallel_workers)
    else:
        raise UsageError(f"{root} holds neither a bag nor a {MANIFEST_NAME}")
    payload = {"root": str(root), "kind": kind, **report.to_dict()}
    lines = [f"{kind} {root}: {len(report.ok)} ok, {len(report.mismatched)} mismatched, "
             f"{len(report.missing)} missing, {len(report.extra)} extra"]
    lines += [f"  MISMATCH {p}" for p, _, _ in report.mismatched]
    lines += [f"  MISSING  {p}" for p in report.missing]
    lines += [f"  EXTRA    {p}" for p in report.extra]
    _emit(cfg, payload, "\n".join(lines))
    return EXIT_OK if report.clean else EXIT_CONTENT


def cmd_bag(cfg: CliConfig, args) -> int:
    if cfg.dry_run:
        _emit(cfg, {"bag": None, "dry_run": True}, f"would bag {args.root} into {args.dest}")
        return EXIT_OK
    dest = bag_pack(args.root, args.dest, workers=cfg.parallel_workers)
    _emit(cfg, {"bag": str(dest), "dry_run": False}, f"bag written to {dest}")
    return EXIT_OK


def cmd_merge(cfg: CliConfig, args) -> int:
    if len(args.paths) < 2:
        raise UsageError("merge needs at least one batch root and a destination")
    *roots, dest = args.paths
    report = merge_batches(roots, dest, dry_run=cfg.dry_run)
    _emit(cfg, report.to_dict(),
          f"{len(report.copied)} copied, {len(report.merged)} merged, "
          f"{len(report.already_present)} already present -> {dest}")
    return EXIT_OK


def cmd_dedupe(cfg: CliConfig, args) -> int:
    apply = args.apply and not cfg.dry_run
    records = dedupe(args.root, apply=apply)
    lines = [f"{'replaced' if apply else 'would replace'} {sum(len(r.duplicate_paths) for r in records)} "
             f"duplicate(s) in {len(records)} group(s)"]
    for r in records:
        lines += [f"  keep {r.kept_path}"] + [f"    dup {d}" for d in r.duplicate_paths]
    _emit(cfg, {"applied": apply, "records": [r.to_dict() for r in records]}, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ledger commands


def _read_ledger(cfg: CliConfig) -> Ledger:
    return Ledger(cfg.ledger_dir, lock_timeout=cfg.lock_timeout, create=False)


def _write_ledger(cfg: CliConfig) -> Ledger:
    if cfg.dry_run:
        raise UsageError("ledger changes are not possible with --dry-run")
    return Ledger(cfg.ledger_dir, lock_timeout=cfg.lock_timeout)


def cmd_ledger(cfg: CliConfig, args) -> int:
    action = args.ledger_command
    if action == "register":
        rec = _write_ledger(cfg).register_carrier(
            args.project, args.carrier, box_id=args.box, order_in_box=args.order_in_box,
            custodian=args.custodian, primary_metadata_ref=args.metadata_ref,
        )
        note = f" (duplicate of {args.carrier!r})" if rec.disambiguation_suffix else ""
        _emit(cfg, rec.to_dict(), f"registered {rec.carrier_id}{note}")
    elif action == "event":
        status = _write_ledger(cfg).record_event(StabilizationEvent(
            args.carrier, Status(args.status), operator=args.operator, software=args.software,
            hardware=args.hardware, output_files=args.output or [], comments=args.comments,
            output_bytes=args.bytes, batch_id=args.batch or "",
        ))
        _emit(cfg, {"carrier_id": args.carrier, "status": status.value}, f"{args.carrier}: {status.value}")
    elif action == "status":
        ledger = _read_ledger(cfg)
        rec = ledger.carrier(args.carrier)
        events = ledger.events_for(args.carrier)
        _emit(cfg, {**rec.to_dict(), "events": [e.to_dict() for e in events]},
              f"{rec.carrier_id}: {rec.status.value} at {rec.location.value} ({len(events)} event(s))")
    elif action == "batch":
        batch = _write_ledger(cfg).open_batch(args.batch, args.carriers, RobotOrder(args.robot_order.capitalize()),
                                               cfg.batch_size_limit)
        _emit(cfg, batch.to_dict(), f"opened batch {batch.batch_id} with {len(batch.carrier_ids)} carrier(s)")
    elif action == "order":
        ledger = _read_ledger(cfg)
        if args.batch not in ledger.batches:
            raise UsageError(f"unknown batch {args.batch!r}")
        order = processing_order(ledger.batches[args.batch])
        _emit(cfg, {"batch_id": args.batch, "order": order}, "\n".join(order))
    elif action == "select":
        candidates = []
        with open(args.candidates, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                try:
                    candidates.append(Candidate(row["carrier_id"], float(row["age_years"]),
                                                float(row["expected_bytes"]), float(row["demand_score"])))
                except (KeyError, ValueError) as exc:
                    raise UsageError(f"{args.candidates}: bad candidate row {row!r}") from exc
        weights = None
        if args.weights:
            parts = [float(x) for x in args.weights.split(",")]
            if len(parts) != 3:
                raise UsageError("--weights takes risk,gain,demand")
            weights = dict(zip(("risk", "gain", "demand"), parts))
        ranked = select_candidates(candidates, weights)
        _emit(cfg, [{"carrier_id": r.carrier_id, "score": r.score} for r in ranked],
              _table([[str(i), r.carrier_id, f"{r.score:.4f}"] for i, r in enumerate(ranked, 1)],
                     ["rank", "carrier", "score"]))
    elif action == "stats":
        ledger = _read_ledger(cfg)
        if args.month:
            year, month = (int(x) for x in args.month.split("-"))
            period = Period.month(year, month)
        elif args.start and args.end:
            period = Period(dt.datetime.fromisoformat(args.start).replace(tzinfo=dt.timezone.utc),
                            dt.datetime.fromisoformat(args.end).replace(tzinfo=dt.timezone.utc))
        else:
            raise UsageError("stats needs --month or --from and --to")
        stats = throughput_stats(ledger.events, period)
        payload = {"carriers_per_month": stats.carriers_per_month, "bytes_per_month": stats.bytes_per_month,
                   "avg_bytes_per_carrier": stats.avg_bytes_per_carrier}
        avg = "n/a" if stats.avg_bytes_per_carrier is None else f"{stats.avg_bytes_per_carrier:.0f}"
        _emit(cfg, payload, f"{stats.carriers_per_month:.2f} carriers/month, "
                            f"{stats.bytes_per_month:.0f} bytes/month, {avg} bytes/carrier")
    elif action == "stage":
        rec = _write_ledger(cfg).advance_stage(args.project, Stage(args.stage), args.tooling)
        _emit(cfg, rec.to_dict(), f"{rec.project_id}: {rec.stage.value}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--ledger-dir", help=f"ledger directory (env {LEDGER_ENV} takes precedence)")
    common.add_argument("--output-root", help="root for stabilized project trees")
    common.add_argument("--workers", type=int, help="carriers processed in parallel (default 2)")
    common.add_argument("--batch-size-limit", type=int, help=f"maximum carriers per batch (default {DEFAULT_BATCH_LIMIT})")
    common.add_argument("--lock-timeout", type=float, help="seconds to wait for the ledger lock")
    common.add_argument("--dry-run", action="store_true", help="report what would happen; change nothing")
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = argparse.ArgumentParser(prog="carrierforge", parents=[common],
                                     description="Stabilize optical carrier images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", parents=[common], help="detect formats and show the processing plan")
    p.add_argument("paths", nargs="+")

    p = sub.add_parser("stabilize", parents=[common], help="run a batch file (carrier_id,image_path,cue_path)")
    p.add_argument("batch_file")
    p.add_argument("--batch-id")
    p.add_argument("--robot-order", choices=["fifo", "lifo"], default="fifo")
    p.add_argument("--operator", default=os.environ.get("USER", ""))

    p = sub.add_parser("verify", parents=[common], help="verify a bag or a manifest-bearing tree")
    p.add_argument("root")

    p = sub.add_parser("bag", parents=[common], help="package a tree as a BagIt bag")
    p.add_argument("root")
    p.add_argument("dest")

    p = sub.add_parser("merge", parents=[common], help="merge verified batch trees: ROOT... DEST")
    p.add_argument("paths", nargs="+")

    p = sub.add_parser("dedupe", parents=[common], help="report (or --apply) duplicate files")
    p.add_argument("root")
    p.add_argument("--apply", action="store_true")

    p = sub.add_parser("ledger", parents=[common], help="query and update the stabilization ledger")
    lsub = p.add_subparsers(dest="ledger_command", required=True)
    q = lsub.add_parser("register", parents=[common], help="register a carrier (a reused id gets a #N suffix)")
    q.add_argument("project")
    q.add_argument("carrier")
    q.add_argument("--box")
    q.add_argument("--order-in-box", type=int)
    q.add_argument("--custodian", default="")
    q.add_argument("--metadata-ref", default="")
    q = lsub.add_parser("event", parents=[common], help="record a stabilization event")
    q.add_argument("carrier")
    q.add_argument("status", choices=[s.value for s in Status])
    q.add_argument("--output", action="append")
    q.add_argument("--bytes", type=int)
    q.add_argument("--operator", default="")
    q.add_argument("--software", default="")
    q.add_argument("--hardware", default="")
    q.add_argument("--comments", default="")
    q.add_argument("--batch")
    q = lsub.add_parser("status", parents=[common], help="show a carrier's status and events")
    q.add_argument("carrier")
    q = lsub.add_parser("batch", parents=[common], help="open a batch")
    q.add_argument("batch")
    q.add_argument("carriers", nargs="+")
    q.add_argument("--robot-order", choices=["fifo", "lifo"], default="fifo")
    q = lsub.add_parser("order", parents=[common], help="show a batch's processing order")
    q.add_argument("batch")
    q = lsub.add_parser("select", parents=[common], help="rank candidates from a CSV")
    q.add_argument("candidates")
    q.add_argument("--weights", help="risk,gain,demand summing to 1")
    q = lsub.add_parser("stats", parents=[common], help="throughput for a month or date range")
    q.add_argument("--month", help="YYYY-MM")
    q.add_argument("--from", dest="start")
    q.add_argument("--to", dest="end")
    q = lsub.add_parser("stage", parents=[common], help="record a project stage")
    q.add_argument("project")
    q.add_argument("stage", choices=[s.value for s in Stage])
    q.add_argument("--tooling", default="")
    return parser


COMMANDS = {
    "identify": cmd_identify, "stabilize": cmd_stabilize, "verify": cmd_verify, "bag": cmd_bag,
    "merge": cmd_merge, "dedupe": cmd_dedupe, "ledger": cmd_ledger,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = CliConfig.from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, LedgerError, LedgerLocked, UnknownCarrier, BagError) as exc:
        print(f"carrierforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MergeConflict, ManifestError, PipelineError) as exc:
        print(f"carrierforge: {exc}", file=sys.stderr)
        return EXIT_CONTENT
    except (OSError, CarrierForgeError) as exc:
        print(f"carrierforge: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
