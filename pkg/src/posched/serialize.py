"""File formats: factory documents, demand CSV, schedule exports.

Documents are JSON with a format_version field; exact rationals travel as
"numerator/denominator" strings and instants as ISO-8601. Parsers reject
unknown fields unless asked to be lenient.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from datetime import date, datetime, time, timedelta
from fractions import Fraction

from .board import GanttBoard, ShortageReport
from .calendars import DAY_NAMES, CalendarSpec, Shift, TimeWindow
from .errors import ParseError, UnknownEntityError
from .metrics import MetricsBundle, MetricsContext
from .model import (
    PRIORITIES,
    BatchRule,
    CrewRule,
    DemandState,
    FactoryModel,
    Material,
    Product,
    RoutingStep,
    Station,
    ToolType,
    Worker,
    WorkOrder,
)
from .rules import CandidateAssignment, Rule
from .taskgraph import TaskGraph
from .vhe import ScheduleRecord

log = logging.getLogger("posched.serialize")

FORMAT_VERSION = 1

DEMAND_HEADER = ["WO Name", "WO Quantity", "End Product", "WO Due Date", "Priority"]
DEMAND_HEADER_ALIAS = "O Name"  # tolerated misspelling of the first column


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def frac_str(value: Fraction) -> str:
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def parse_frac(text) -> Fraction:
    if isinstance(text, int):
        return Fraction(text)
    return Fraction(str(text))


def iso(instant: datetime) -> str:
    return instant.isoformat()


def parse_iso(text: str) -> datetime:
    return datetime.fromisoformat(text)


def _reject_unknown(doc: dict, allowed: set[str], where: str, lenient: bool) -> None:
    unknown = sorted(set(doc) - allowed)
    if not unknown:
        return
    message = f"unknown field(s) in {where}: {', '.join(unknown)}"
    if lenient:
        log.warning(message)
    else:
        raise ParseError(message)


# -- calendars ---------------------------------------------------------------


def _minute_of_day(text: str) -> int:
    try:
        hh, mm = text.split(":")
        minute = int(hh) * 60 + int(mm)
    except ValueError as exc:
        raise ParseError(f"bad time of day {text!r}") from exc
    if text == "24:00":
        return 24 * 60
    if not (0 <= minute <= 24 * 60):
        raise ParseError(f"time of day {text!r} out of range")
    return minute


def _time_of_day(minute: int) -> str:
    return f"{minute // 60:02d}:{minute % 60:02d}"


def calendar_to_doc(spec: CalendarSpec) -> dict:
    return {
        "shifts": [
            {
                "days": [DAY_NAMES[d] for d in sorted(shift.days)],
                "start": _time_of_day(shift.start_minute),
                "end": _time_of_day(shift.end_minute),
            }
            for shift in spec.shifts
        ],
        "unavailable_dates": [d.isoformat() for d in spec.unavailable_dates],
    }


def calendar_from_doc(doc: dict, where: str, lenient: bool = False) -> CalendarSpec:
    _reject_unknown(doc, {"shifts", "unavailable_dates"}, where, lenient)
    shifts = []
    for i, shift_doc in enumerate(doc.get("shifts", [])):
        _reject_unknown(shift_doc, {"days", "start", "end"}, f"{where}.shifts[{i}]", lenient)
        try:
            days = frozenset(DAY_NAMES.index(d) for d in shift_doc["days"])
        except ValueError as exc:
            raise ParseError(f"bad day name in {where}: {shift_doc['days']}") from exc
        shifts.append(
            Shift(days, _minute_of_day(shift_doc["start"]), _minute_of_day(shift_doc["end"]))
        )
    dates = tuple(date.fromisoformat(d) for d in doc.get("unavailable_dates", []))
    return CalendarSpec(tuple(shifts), dates)


# -- factory -----------------------------------------------------------------


def factory_to_doc(factory: FactoryModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "factory",
        "horizon": {"start": iso(factory.horizon.start), "end": iso(factory.horizon.end)},
        "stations": [
            {
                "id": s.id,
                "capability_class": s.capability_class,
                "capacity_attrs": dict(sorted(s.capacity_attrs.items())),
                "calendar": calendar_to_doc(s.calendar),
                "batch": None
                if s.batch is None
                else {
                    "compatibility_key": s.batch.compatibility_key,
                    "max_slots": s.batch.max_slots,
                },
                "crew": None
                if s.crew is None
                else {
                    "min_workers": s.crew.min_workers,
                    "max_workers": s.crew.max_workers,
                    "productivity": {
                        str(size): frac_str(factor)
                        for size, factor in sorted(s.crew.productivity.items())
                    },
                },
            }
            for s in factory.stations
        ],
        "tools": [{"id": t.id, "count": t.count} for t in factory.tools],
        "workers": [
            {
                "id": w.id,
                "skills": sorted(w.skills),
                "calendar": calendar_to_doc(w.calendar),
            }
            for w in factory.workers
        ],
        "materials": [{"id": m.id, "on_hand": m.on_hand} for m in factory.materials],
        "products": [
            {
                "id": p.id,
                "routing": [
                    {
                        "name": step.name,
                        "capability_class": step.capability_class,
                        "base_duration": step.base_duration,
                        "duration_scaling": step.duration_scaling,
                        "required_tools": dict(sorted(step.required_tools.items())),
                        "required_material": None
                        if step.required_material is None
                        else list(step.required_material),
                        "required_skill": step.required_skill,
                        "overlap_fraction": frac_str(step.overlap_fraction),
                        "attrs": dict(sorted(step.attrs.items())),
                        "pausable": step.pausable,
                    }
                    for step in p.routing
                ],
            }
            for p in factory.products
        ],
        "wo_dependencies": [list(pair) for pair in factory.wo_dependencies],
    }


_STATION_FIELDS = {"id", "capability_class", "capacity_attrs", "calendar", "batch", "crew"}
_STEP_FIELDS = {
    "name", "capability_class", "base_duration", "duration_scaling", "required_tools",
    "required_material", "required_skill", "overlap_fraction", "attrs", "pausable",
}


def factory_from_doc(doc: dict, lenient: bool = False) -> FactoryModel:
    _reject_unknown(
        doc,
        {"format_version", "kind", "horizon", "stations", "tools", "workers",
         "materials", "products", "wo_dependencies"},
        "factory document",
        lenient,
    )
    if doc.get("kind") != "factory":
        raise ParseError("document kind must be 'factory'")
    horizon_doc = doc["horizon"]
    _reject_unknown(horizon_doc, {"start", "end"}, "horizon", lenient)
    horizon = TimeWindow(parse_iso(horizon_doc["start"]), parse_iso(horizon_doc["end"]))

    stations = []
    for s in doc.get("stations", []):
        _reject_unknown(s, _STATION_FIELDS, f"station {s.get('id')}", lenient)
        batch = s.get("batch")
        crew = s.get("crew")
        stations.append(
            Station(
                id=s["id"],
                capability_class=s["capability_class"],
                capacity_attrs=dict(s.get("capacity_attrs", {})),
                calendar=calendar_from_doc(s["calendar"], f"station {s['id']}", lenient),
                batch=None
                if batch is None
                else BatchRule(batch["compatibility_key"], batch["max_slots"]),
                crew=None
                if crew is None
                else CrewRule(
                    crew["min_workers"],
                    crew["max_workers"],
                    {int(k): parse_frac(v) for k, v in crew["productivity"].items()},
                ),
            )
        )
    tools = tuple(ToolType(t["id"], t["count"]) for t in doc.get("tools", []))
    workers = tuple(
        Worker(
            w["id"],
            frozenset(w["skills"]),
            calendar_from_doc(w["calendar"], f"worker {w['id']}", lenient),
        )
        for w in doc.get("workers", [])
    )
    materials = tuple(Material(m["id"], m["on_hand"]) for m in doc.get("materials", []))
    products = []
    for p in doc.get("products", []):
        routing = []
        for step in p["routing"]:
            _reject_unknown(step, _STEP_FIELDS, f"product {p['id']} step", lenient)
            material = step.get("required_material")
            routing.append(
                RoutingStep(
                    name=step["name"],
                    capability_class=step["capability_class"],
                    base_duration=step["base_duration"],
                    duration_scaling=step.get("duration_scaling", "fixed"),
                    required_tools=dict(step.get("required_tools", {})),
                    required_material=None if material is None else (material[0], material[1]),
                    required_skill=step.get("required_skill"),
                    overlap_fraction=parse_frac(step.get("overlap_fraction", "1")),
                    attrs=dict(step.get("attrs", {})),
                    pausable=bool(step.get("pausable", False)),
                )
            )
        products.append(Product(p["id"], tuple(routing)))
    return FactoryModel(
        horizon=horizon,
        stations=tuple(stations),
        tools=tools,
        workers=workers,
        materials=materials,
        products=tuple(products),
        wo_dependencies=tuple((a, b) for a, b in doc.get("wo_dependencies", [])),
    )


# -- demand ------------------------------------------------------------------


def parse_demand(text: str) -> DemandState:
    """Parse the demand CSV: one work order per row, urgencies zeroed.

    Due dates are day-first (dd/MM/yyyy) and are treated as end-of-day
    inclusive: the stored instant is midnight after the stated date.
    """
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise ParseError("empty demand file")
    header = [cell.strip() for cell in rows[0]]
    if header and header[0] == DEMAND_HEADER_ALIAS:
        header = [DEMAND_HEADER[0]] + header[1:]
    if header != DEMAND_HEADER:
        raise ParseError(f"bad header {header!r}, expected {DEMAND_HEADER!r}")
    orders = []
    seen: set[str] = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(DEMAND_HEADER):
            raise ParseError(f"expected {len(DEMAND_HEADER)} columns", line=line_no)
        name, qty_text, product, due_text, priority = (cell.strip() for cell in row)
        if name in seen:
            raise ParseError(f"duplicate work order {name}", line=line_no)
        seen.add(name)
        try:
            quantity = int(qty_text)
        except ValueError:
            raise ParseError(f"bad quantity {qty_text!r}", line=line_no) from None
        try:
            day, month, year = (int(part) for part in due_text.split("/"))
            due_day = date(year, month, day)
        except ValueError:
            raise ParseError(f"bad date {due_text!r} (expected dd/MM/yyyy)", line=line_no) from None
        if priority not in PRIORITIES:
            raise ParseError(f"bad priority {priority!r}", line=line_no)
        due_instant = datetime.combine(due_day, time.min) + timedelta(days=1)
        orders.append(WorkOrder(name, quantity, product, due_instant, priority))
    return DemandState(tuple(orders))


def export_demand(demand: DemandState) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(DEMAND_HEADER)
    for wo in demand.work_orders:
        due_day = (wo.due_date - timedelta(minutes=1)).date()
        writer.writerow(
            [wo.id, wo.quantity, wo.product_id, due_day.strftime("%d/%m/%Y"), wo.priority]
        )
    return out.getvalue()


# -- metrics -----------------------------------------------------------------


def metrics_to_doc(m: MetricsBundle) -> dict:
    return {
        "macro": {
            "due_date_compliance": frac_str(m.due_date_compliance),
            "makespan": m.makespan,
            "throughput_wos": m.throughput_wos,
            "throughput_units": m.throughput_units,
            "avg_machine_utilization": frac_str(m.avg_machine_utilization),
            "material_consumption": m.material_consumption,
            "unscheduled_tasks": m.unscheduled_tasks,
        },
        "micro": {
            "station_utilization": {k: frac_str(v) for k, v in sorted(m.station_utilization.items())},
            "capability_utilization": {
                k: frac_str(v) for k, v in sorted(m.capability_utilization.items())
            },
            "wo_lateness": dict(sorted(m.wo_lateness.items())),
            "wo_slack": dict(sorted(m.wo_slack.items())),
            "priority_compliance": {
                k: frac_str(v) for k, v in sorted(m.priority_compliance.items())
            },
            "tool_peak_usage": dict(sorted(m.tool_peak_usage.items())),
        },
        "context": {
            "horizon_minutes": m.context.horizon_minutes,
            "total_wos": m.context.total_wos,
            "total_tasks": m.context.total_tasks,
            "total_quantity": m.context.total_quantity,
            "total_material_requirement": m.context.total_material_requirement,
        },
    }


def metrics_from_doc(doc: dict) -> MetricsBundle:
    macro = doc["macro"]
    micro = doc["micro"]
    ctx = doc["context"]
    return MetricsBundle(
        due_date_compliance=parse_frac(macro["due_date_compliance"]),
        makespan=macro["makespan"],
        throughput_wos=macro["throughput_wos"],
        throughput_units=macro["throughput_units"],
        avg_machine_utilization=parse_frac(macro["avg_machine_utilization"]),
        material_consumption=macro["material_consumption"],
        unscheduled_tasks=macro["unscheduled_tasks"],
        station_utilization={k: parse_frac(v) for k, v in micro["station_utilization"].items()},
        capability_utilization={
            k: parse_frac(v) for k, v in micro["capability_utilization"].items()
        },
        wo_lateness=dict(micro["wo_lateness"]),
        wo_slack=dict(micro["wo_slack"]),
        priority_compliance={k: parse_frac(v) for k, v in micro["priority_compliance"].items()},
        tool_peak_usage=dict(micro["tool_peak_usage"]),
        context=MetricsContext(
            horizon_minutes=ctx["horizon_minutes"],
            total_wos=ctx["total_wos"],
            total_tasks=ctx["total_tasks"],
            total_quantity=ctx["total_quantity"],
            total_material_requirement=ctx["total_material_requirement"],
        ),
    )


# -- schedules ---------------------------------------------------------------


def assignment_to_doc(cand: CandidateAssignment, factory: FactoryModel, graph: TaskGraph) -> dict:
    task = graph.tasks[cand.task_id]
    return {
        "task": cand.task_id,
        "wo": task.wo_id,
        "step": task.step.name,
        "station": cand.station_id,
        "tools": list(cand.tool_ids),
        "workers": list(cand.worker_ids),
        "start": iso(factory.horizon.to_datetime(cand.start)),
        "end": iso(factory.horizon.to_datetime(cand.end)),
        "batch_session": cand.batch_session,
    }


def assignment_from_doc(doc: dict, factory: FactoryModel, lenient: bool = False) -> CandidateAssignment:
    _reject_unknown(
        doc,
        {"task", "wo", "step", "station", "tools", "workers", "start", "end", "batch_session"},
        "assignment",
        lenient,
    )
    return CandidateAssignment(
        task_id=doc["task"],
        station_id=doc["station"],
        start=factory.horizon.to_minute(parse_iso(doc["start"])),
        end=factory.horizon.to_minute(parse_iso(doc["end"])),
        tool_ids=tuple(doc.get("tools", [])),
        worker_ids=tuple(doc.get("workers", [])),
        batch_session=doc.get("batch_session"),
    )


def shortage_to_doc(report: ShortageReport) -> dict:
    return {
        "task": report.task_id,
        "rule_code": report.rule_code.value,
        "kind": report.kind,
        "subject": report.subject,
        "detail": report.detail,
    }


def shortage_from_doc(doc: dict) -> ShortageReport:
    return ShortageReport(
        task_id=doc["task"],
        rule_code=Rule(doc["rule_code"]),
        kind=doc["kind"],
        subject=doc["subject"],
        detail=doc.get("detail", ""),
    )


def record_to_doc(
    record: ScheduleRecord,
    factory: FactoryModel,
    graph: TaskGraph,
    insights: list | None = None,
    include_build_stats: bool = True,
) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "schedule",
        "provenance": {
            "vhe_id": record.vhe_id,
            "iteration": record.iteration,
            "seed": record.seed,
        },
        "horizon_start": iso(factory.horizon.start),
        "assignments": [
            assignment_to_doc(record.board.assignments[aid], factory, graph)
            for aid in sorted(record.board.assignments)
        ],
        "locked": sorted(record.board.locked),
        "unscheduled": [
            {"task": tid, "report": shortage_to_doc(report)}
            for tid, report in record.unscheduled
        ],
        "demand_snapshot": {
            wo_id: frac_str(value) for wo_id, value in sorted(record.demand_snapshot.items())
        },
        "placement_order": list(record.placement_order),
        "metrics": metrics_to_doc(record.metrics),
    }
    if insights is not None:
        doc["insights"] = [
            {"task": ins.task_id, "wo": ins.wo_id, "message": ins.message,
             "cause": ins.cause.value}
            for ins in insights
        ]
    if include_build_stats:
        doc["build_stats"] = {
            "build_seconds": record.build_seconds,
            "placements_tried": record.placements_tried,
        }
    return doc


def board_from_assignment_docs(docs, factory: FactoryModel, graph: TaskGraph) -> GanttBoard:
    """Rebuild a board by replaying assignment documents through placement."""
    board = GanttBoard()
    for doc in docs:
        cand = assignment_from_doc(doc, factory)
        if cand.task_id not in graph.tasks:
            raise UnknownEntityError("task", cand.task_id)
        if cand.station_id not in factory.stations_by_id:
            raise UnknownEntityError("station", cand.station_id)
        board.place(cand, factory, graph)
    return board


def record_from_doc(doc: dict, factory: FactoryModel, graph: TaskGraph) -> ScheduleRecord:
    if doc.get("kind") != "schedule":
        raise ParseError("document kind must be 'schedule'")
    board = board_from_assignment_docs(doc.get("assignments", []), factory, graph)
    if doc.get("locked"):
        board.lock(doc["locked"])
    stats = doc.get("build_stats", {})
    return ScheduleRecord(
        vhe_id=doc["provenance"]["vhe_id"],
        iteration=doc["provenance"]["iteration"],
        board=board,
        unscheduled=tuple(
            (entry["task"], shortage_from_doc(entry["report"]))
            for entry in doc.get("unscheduled", [])
        ),
        metrics=metrics_from_doc(doc["metrics"]),
        demand_snapshot={
            wo_id: parse_frac(value) for wo_id, value in doc.get("demand_snapshot", {}).items()
        },
        seed=doc["provenance"].get("seed", 0),
        placement_order=tuple(doc.get("placement_order", [])),
        build_seconds=stats.get("build_seconds", 0.0),
        placements_tried=stats.get("placements_tried", 0),
    )


def record_content_hash(record: ScheduleRecord, factory: FactoryModel, graph: TaskGraph) -> str:
    """Deterministic hash over the board and metrics only (no build stats)."""
    doc = record_to_doc(record, factory, graph, include_build_stats=False)
    doc.pop("placement_order", None)
    return content_hash(doc)


# -- residual boards ---------------------------------------------------------


def residual_board_from_doc(doc: dict, factory: FactoryModel, graph: TaskGraph) -> GanttBoard:
    """A board of locked tiles carried in from a previous schedule."""
    if doc and doc.get("kind") not in (None, "schedule", "residual"):
        raise ParseError("residual document kind must be 'schedule' or 'residual'")
    board = board_from_assignment_docs(doc.get("assignments", []), factory, graph)
    board.lock(list(board.assignments))
    return board
