"""Append-only repository of schedules, best-schedule selection, flavors,
and the insight messages attached to unscheduled tasks."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .board import ShortageReport
from .errors import DuplicateKeyError, EmptySdsError, InvalidRecordError
from .metrics import GoalWeights, z_score
from .model import FactoryModel
from .board import revalidate
from .serialize import (
    canonical_json,
    record_content_hash,
    record_from_doc,
    record_to_doc,
)
from .taskgraph import TaskGraph
from .vhe import ScheduleRecord


@dataclass(frozen=True)
class Insight:
    task_id: str
    wo_id: str
    message: str
    cause: object  # Rule


@dataclass(frozen=True)
class AppendReceipt:
    vhe_id: int
    iteration: int
    content_hash: str


def insight_message(report: ShortageReport) -> str:
    """The fixed template for one shortage kind."""
    if report.kind == "stations":
        return f"Task not scheduled due to shortage in {report.subject} stations."
    if report.kind == "tools":
        return f'Task not scheduled due to shortage in "{report.subject}" tools.'
    if report.kind == "workers":
        return f'Task not scheduled due to shortage in qualified "{report.subject}" workers.'
    if report.kind == "material":
        return f"Task not scheduled due to shortage of material {report.subject}."
    if report.kind == "horizon":
        return "Work order duration beyond the time horizon"
    raise ValueError(f"unknown shortage kind {report.kind!r}")


def insights(record: ScheduleRecord, graph: TaskGraph) -> list[Insight]:
    """One templated insight per unscheduled task."""
    out = []
    for task_id, report in record.unscheduled:
        out.append(
            Insight(
                task_id=task_id,
                wo_id=graph.tasks[task_id].wo_id,
                message=insight_message(report),
                cause=report.rule_code,
            )
        )
    return out


class ScheduleDataSet:
    """All schedules of one run, keyed by (vhe id, iteration).

    Appends are serialized; when a root directory is given every record is
    persisted as its own file plus an index manifest, fsynced, so a crash
    never loses an acknowledged append.
    """

    def __init__(
        self,
        run_id: str,
        factory: FactoryModel,
        graph: TaskGraph,
        demand=None,
        root: Path | None = None,
    ):
        self.run_id = run_id
        self.factory = factory
        self.graph = graph
        self.demand = demand
        self.root = Path(root) if root is not None else None
        self._records: dict[tuple[int, int], ScheduleRecord] = {}
        self._hashes: dict[tuple[int, int], str] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            (self.root / "records").mkdir(parents=True, exist_ok=True)

    def __len__(self) -> int:
        return len(self._records)

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self._records)

    def get(self, vhe_id: int, iteration: int) -> ScheduleRecord:
        return self._records[(vhe_id, iteration)]

    def records(self) -> list[ScheduleRecord]:
        return [self._records[key] for key in sorted(self._records)]

    def append(self, record: ScheduleRecord) -> AppendReceipt:
        """Validate, persist and index one record; duplicates are refused."""
        problems = revalidate(record.board, self.factory, self.graph)
        if problems:
            raise InvalidRecordError(problems)
        digest = record_content_hash(record, self.factory, self.graph)
        with self._lock:
            key = record.key
            if key in self._records:
                raise DuplicateKeyError(*key)
            if self.root is not None:
                self._write_record(record, digest)
            self._records[key] = record
            self._hashes[key] = digest
            if self.root is not None:
                self._write_manifest()
        return AppendReceipt(record.vhe_id, record.iteration, digest)

    def content_hashes(self) -> dict[tuple[int, int], str]:
        return dict(self._hashes)

    def record_path(self, vhe_id: int, iteration: int) -> Path:
        assert self.root is not None
        return self.root / "records" / f"k{vhe_id}-j{iteration}.json"

    def _write_record(self, record: ScheduleRecord, digest: str) -> None:
        doc = record_to_doc(record, self.factory, self.graph)
        doc["content_hash"] = digest
        path = self.record_path(record.vhe_id, record.iteration)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(doc))
            fh.flush()
            os.fsync(fh.fileno())

    def _write_manifest(self) -> None:
        manifest = {
            "format_version": 1,
            "kind": "sds-manifest",
            "run_id": self.run_id,
            "records": [
                {
                    "vhe_id": k,
                    "iteration": j,
                    "content_hash": self._hashes[(k, j)],
                    "file": f"records/k{k}-j{j}.json",
                }
                for k, j in sorted(self._records)
            ],
        }
        tmp = self.root / "manifest.json.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(manifest))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.root / "manifest.json")


def load_sds(root: Path, factory: FactoryModel, graph: TaskGraph, demand=None) -> ScheduleDataSet:
    """Reload a persisted dataset; records round-trip to deep-equal values."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    sds = ScheduleDataSet(manifest["run_id"], factory, graph, demand=demand, root=None)
    sds.root = root  # reuse the existing directory without re-creating files
    for entry in manifest["records"]:
        doc = json.loads((root / entry["file"]).read_text(encoding="utf-8"))
        doc.pop("content_hash", None)
        record = record_from_doc(doc, factory, graph)
        key = (record.vhe_id, record.iteration)
        sds._records[key] = record
        sds._hashes[key] = entry["content_hash"]
    return sds


def best(sds: ScheduleDataSet, weights: GoalWeights) -> ScheduleRecord:
    """The max-Z record; ties break to the earlier (vhe id, iteration)."""
    if len(sds) == 0:
        raise EmptySdsError()
    best_record = None
    best_z = None
    for key in sds.keys():
        record = sds.get(*key)
        z = z_score(record.metrics, weights)
        if best_z is None or z > best_z:
            best_record, best_z = record, z
    return best_record


def arrangement_distance(a: ScheduleRecord, b: ScheduleRecord, total_tasks: int) -> Fraction:
    """Fraction of tasks whose (station, start) differ between two boards.

    A task scheduled in one board and not the other counts as differing;
    a task missing from both does not.
    """
    if total_tasks == 0:
        return Fraction(0)
    task_ids = set(a.board.assignments) | set(b.board.assignments)
    differing = 0
    for tid in task_ids:
        ca = a.board.assignments.get(tid)
        cb = b.board.assignments.get(tid)
        key_a = None if ca is None else (ca.station_id, ca.start)
        key_b = None if cb is None else (cb.station_id, cb.start)
        if key_a != key_b:
            differing += 1
    return Fraction(differing, total_tasks)


def flavors(
    sds: ScheduleDataSet,
    weights: GoalWeights,
    epsilon: Fraction = Fraction(1, 100),
    delta: Fraction = Fraction(1, 5),
) -> list[ScheduleRecord]:
    """Near-best schedules whose tile arrangements differ materially.

    Keeps every record within epsilon of the best Z, greedily filtered so
    each returned pair is at least delta apart in arrangement distance.
    """
    if len(sds) == 0:
        raise EmptySdsError()
    scored = []
    for key in sds.keys():
        record = sds.get(*key)
        scored.append((z_score(record.metrics, weights), record))
    top = max(z for z, _ in scored)
    eligible = [
        (z, record)
        for z, record in scored
        if z >= top - epsilon
    ]
    eligible.sort(key=lambda pair: (-pair[0], pair[1].vhe_id, pair[1].iteration))
    total_tasks = len(sds.graph.tasks)
    kept: list[ScheduleRecord] = []
    for _, record in eligible:
        if all(
            arrangement_distance(record, other, total_tasks) >= delta for other in kept
        ):
            kept.append(record)
    return kept
