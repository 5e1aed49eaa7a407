"""The rules of the game: is a candidate assignment valid on a given board?

`check_assignment` returns every violation it finds, not just the first, so
callers can explain exactly why a tile is rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from .calendars import IntervalSet, build_calendar
from .errors import CrewSizeError, UnknownEntityError
from .model import FactoryModel, Station
from .taskgraph import Task, TaskGraph


class Rule(Enum):
    MACHINE_CAPABILITY = "MachineCapability"
    OUTSIDE_CALENDAR = "OutsideCalendar"
    PRECEDENCE_OVERLAP = "PrecedenceOverlap"
    RESOURCE_BUSY = "ResourceBusy"
    BATCH_INCOMPATIBLE = "BatchIncompatible"
    BATCH_FULL = "BatchFull"
    TOOL_SHORTAGE = "ToolShortage"
    MATERIAL_SHORTAGE = "MaterialShortage"
    SKILL_MISMATCH = "SkillMismatch"
    CREW_SIZE = "CrewSize"
    HORIZON_EXCEEDED = "HorizonExceeded"


_RULE_ORDER = {rule: i for i, rule in enumerate(Rule)}


@dataclass(frozen=True)
class Violation:
    rule_code: Rule
    message: str
    offending_entity: str

    def sort_key(self):
        return (_RULE_ORDER[self.rule_code], self.offending_entity, self.message)


@dataclass(frozen=True)
class CandidateAssignment:
    """A task bound to a station, tools, workers and a time span (a tile)."""

    task_id: str
    station_id: str
    start: int
    end: int
    tool_ids: tuple[str, ...] = ()
    worker_ids: tuple[str, ...] = ()
    batch_session: str | None = None

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError("assignment start must precede end")
        object.__setattr__(self, "tool_ids", tuple(sorted(self.tool_ids)))
        object.__setattr__(self, "worker_ids", tuple(sorted(self.worker_ids)))

    @property
    def crew_size(self) -> int:
        return len(self.worker_ids)


@dataclass(frozen=True)
class EligibleResources:
    stations: tuple[Station, ...]
    tool_units: dict[str, tuple[str, ...]]
    workers: tuple[str, ...]


def effective_duration(task: Task, station: Station, crew_size: int) -> int:
    """Work minutes of `task` on `station` with the given crew.

    The base duration is divided by the crew's speed factor and rounded up.
    """
    base = task.base_minutes
    if station.crew is None:
        if crew_size not in (0, 1):
            raise CrewSizeError(station.id, crew_size, 0, 1)
        return base
    rule = station.crew
    if not (rule.min_workers <= crew_size <= rule.max_workers):
        raise CrewSizeError(station.id, crew_size, rule.min_workers, rule.max_workers)
    factor = rule.factor(crew_size)
    return math.ceil(Fraction(base) / factor)


def _numeric_attrs(attrs: dict[str, object]) -> dict[str, float]:
    out = {}
    for key, value in attrs.items():
        if isinstance(value, bool):
            continue
        if isinstance(value, (int, float, Fraction)):
            out[key] = value
    return out


def station_can_process(station: Station, task: Task) -> bool:
    """Capability class match plus attribute dominance (station >= task)."""
    if station.capability_class != task.step.capability_class:
        return False
    for key, value in _numeric_attrs(task.step.attrs).items():
        have = station.capacity_attrs.get(key)
        if have is None or have < value:
            return False
    return True


def eligible_resources(task: Task, factory: FactoryModel) -> EligibleResources:
    """Stations, tool units and workers that could in principle serve `task`."""
    stations = tuple(
        s for s in sorted(factory.stations, key=lambda s: s.id) if station_can_process(s, task)
    )
    tool_units = {}
    for tool_type in sorted(task.step.required_tools):
        tt = factory.tools_by_id.get(tool_type)
        tool_units[tool_type] = tt.unit_ids() if tt is not None and tt.count > 0 else ()
    skill = task.step.required_skill
    workers = tuple(
        w.id
        for w in sorted(factory.workers, key=lambda w: w.id)
        if skill is None or skill in w.skills
    )
    return EligibleResources(stations=stations, tool_units=tool_units, workers=workers)


def required_worker_count(task: Task, station: Station) -> tuple[int, int]:
    """(min, max) workers a valid assignment of `task` on `station` carries."""
    if station.crew is not None:
        return station.crew.min_workers, station.crew.max_workers
    if task.step.required_skill is not None:
        return 1, 1
    return 0, 0


def material_consumption(task: Task) -> tuple[str, int] | None:
    req = task.step.required_material
    if req is None:
        return None
    material_id, per_unit = req
    return material_id, per_unit * task.quantity


class _CalendarCache:
    """Per-check memo of materialized calendars."""

    def __init__(self, factory: FactoryModel):
        self.factory = factory
        self._cache: dict[tuple[str, str], IntervalSet] = {}

    def station(self, station: Station) -> IntervalSet:
        key = ("st", station.id)
        if key not in self._cache:
            self._cache[key] = build_calendar(station.calendar, self.factory.horizon)
        return self._cache[key]

    def worker(self, worker_id: str) -> IntervalSet:
        key = ("wk", worker_id)
        if key not in self._cache:
            worker = self.factory.workers_by_id[worker_id]
            self._cache[key] = build_calendar(worker.calendar, self.factory.horizon)
        return self._cache[key]


_SHARED_CACHES: dict[int, _CalendarCache] = {}


def calendar_cache(factory: FactoryModel) -> _CalendarCache:
    # Entries hold a strong reference to their factory, so ids stay valid.
    cache = _SHARED_CACHES.get(id(factory))
    if cache is None or cache.factory is not factory:
        cache = _CalendarCache(factory)
        if len(_SHARED_CACHES) >= 8:
            _SHARED_CACHES.pop(next(iter(_SHARED_CACHES)))
        _SHARED_CACHES[id(factory)] = cache
    return cache


def ceil_fraction(fraction: Fraction, minutes: int) -> int:
    value = fraction * minutes
    return -(-value.numerator // value.denominator)


def check_assignment(cand, board, factory: FactoryModel, graph: TaskGraph):
    """All violations of `cand` against `board`; empty list means valid.

    Entities referenced by the candidate must exist; dangling references
    raise UnknownEntityError instead of producing violations.
    """
    task = graph.tasks.get(cand.task_id)
    if task is None:
        raise UnknownEntityError("task", cand.task_id)
    station = factory.stations_by_id.get(cand.station_id)
    if station is None:
        raise UnknownEntityError("station", cand.station_id)
    for worker_id in cand.worker_ids:
        if worker_id not in factory.workers_by_id:
            raise UnknownEntityError("worker", worker_id)
    for unit_id in cand.tool_ids:
        if unit_id not in factory.tool_unit_types:
            raise UnknownEntityError("tool unit", unit_id)

    violations: list[Violation] = []
    cache = calendar_cache(factory)
    horizon_minutes = factory.horizon.minutes

    # machine capability
    if not station_can_process(station, task):
        violations.append(
            Violation(
                Rule.MACHINE_CAPABILITY,
                f"station {station.id} cannot process task {task.id} "
                f"(needs {task.step.capability_class} with {_numeric_attrs(task.step.attrs)})",
                station.id,
            )
        )

    # horizon
    if cand.start < 0 or cand.end > horizon_minutes:
        violations.append(
            Violation(
                Rule.HORIZON_EXCEEDED,
                f"span [{cand.start}, {cand.end}) outside horizon [0, {horizon_minutes})",
                task.wo_id,
            )
        )

    # crew size
    lo, hi = required_worker_count(task, station)
    crew_ok = lo <= cand.crew_size <= hi
    if not crew_ok:
        violations.append(
            Violation(
                Rule.CREW_SIZE,
                f"{cand.crew_size} workers assigned, station {station.id} requires "
                f"between {lo} and {hi}",
                station.id,
            )
        )

    # skills
    skill = task.step.required_skill
    if skill is not None:
        for worker_id in cand.worker_ids:
            if skill not in factory.workers_by_id[worker_id].skills:
                violations.append(
                    Violation(
                        Rule.SKILL_MISMATCH,
                        f"worker {worker_id} lacks skill {skill}",
                        worker_id,
                    )
                )
        if not cand.worker_ids:
            violations.append(
                Violation(
                    Rule.SKILL_MISMATCH,
                    f"no worker assigned with skill {skill}",
                    task.id,
                )
            )

    # calendars and exact work coverage
    station_cal = cache.station(station)
    work_pairs = station_cal.intersect_span(cand.start, cand.end)
    worked = sum(e - s for s, e in work_pairs)
    duration = None
    if crew_ok and station_can_process(station, task):
        duration = effective_duration(task, station, cand.crew_size)
    if task.step.pausable:
        tight = (
            station_cal.contains_minute(cand.start)
            and station_cal.contains_minute(cand.end - 1)
        )
        if duration is not None and (worked != duration or not tight):
            violations.append(
                Violation(
                    Rule.OUTSIDE_CALENDAR,
                    f"span [{cand.start}, {cand.end}) covers {worked} working minutes "
                    f"on {station.id}, task needs exactly {duration}",
                    station.id,
                )
            )
        elif duration is None and not tight:
            violations.append(
                Violation(
                    Rule.OUTSIDE_CALENDAR,
                    f"span edges of [{cand.start}, {cand.end}) fall outside the "
                    f"calendar of {station.id}",
                    station.id,
                )
            )
    else:
        contiguous = station_cal.contains_span(cand.start, cand.end)
        want = duration if duration is not None else cand.end - cand.start
        if not contiguous or cand.end - cand.start != want:
            violations.append(
                Violation(
                    Rule.OUTSIDE_CALENDAR,
                    f"span [{cand.start}, {cand.end}) must be one contiguous window "
                    f"of exactly {want} minutes inside the calendar of {station.id}",
                    station.id,
                )
            )
    for worker_id in cand.worker_ids:
        worker_cal = cache.worker(worker_id)
        if task.step.pausable:
            ok = worker_cal.covers_pairs(work_pairs)
        else:
            ok = worker_cal.contains_span(cand.start, cand.end)
        if not ok:
            violations.append(
                Violation(
                    Rule.OUTSIDE_CALENDAR,
                    f"worker {worker_id} is not available over the working minutes "
                    f"of [{cand.start}, {cand.end})",
                    worker_id,
                )
            )

    # precedence, both directions, for tasks already on the board
    for pred_id, fraction in task.predecessors:
        pred = board.assignments.get(pred_id)
        if pred is None:
            continue
        earliest = pred.start + ceil_fraction(fraction, pred.end - pred.start)
        if cand.start < earliest:
            violations.append(
                Violation(
                    Rule.PRECEDENCE_OVERLAP,
                    f"task {task.id} may start at {earliest} at the earliest "
                    f"(predecessor {pred_id} spans [{pred.start}, {pred.end}), "
                    f"overlap {fraction})",
                    pred_id,
                )
            )
    for succ_id, fraction in graph.successors.get(task.id, ()):
        succ = board.assignments.get(succ_id)
        if succ is None:
            continue
        earliest = cand.start + ceil_fraction(fraction, cand.end - cand.start)
        if succ.start < earliest:
            violations.append(
                Violation(
                    Rule.PRECEDENCE_OVERLAP,
                    f"successor {succ_id} starts at {succ.start}, before the "
                    f"{earliest} implied by this span and overlap {fraction}",
                    succ_id,
                )
            )

    # resource busy: station, workers, individual tool units
    session_members = (
        set(board.session_members.get(cand.batch_session, ()))
        if cand.batch_session is not None
        else set()
    )
    for other in board.overlapping("st", station.id, cand.start, cand.end):
        if other == cand.task_id:
            continue
        if other in session_members:
            continue
        violations.append(
            Violation(
                Rule.RESOURCE_BUSY,
                f"station {station.id} is busy with {other}",
                other,
            )
        )
    for worker_id in cand.worker_ids:
        for other in board.overlapping("wk", worker_id, cand.start, cand.end):
            if other == cand.task_id:
                continue
            violations.append(
                Violation(
                    Rule.RESOURCE_BUSY,
                    f"worker {worker_id} is busy with {other}",
                    other,
                )
            )
    for unit_id in cand.tool_ids:
        for other in board.overlapping("tl", unit_id, cand.start, cand.end):
            if other == cand.task_id:
                continue
            violations.append(
                Violation(
                    Rule.RESOURCE_BUSY,
                    f"tool {unit_id} is busy with {other}",
                    other,
                )
            )

    # tool quantities
    provided: dict[str, int] = {}
    for unit_id in cand.tool_ids:
        provided[factory.tool_unit_types[unit_id]] = (
            provided.get(factory.tool_unit_types[unit_id], 0) + 1
        )
    if len(set(cand.tool_ids)) != len(cand.tool_ids):
        violations.append(
            Violation(Rule.TOOL_SHORTAGE, "duplicate tool units assigned", task.id)
        )
    for tool_type, needed in sorted(task.step.required_tools.items()):
        have = provided.get(tool_type, 0)
        if have != needed:
            violations.append(
                Violation(
                    Rule.TOOL_SHORTAGE,
                    f"task needs {needed} unit(s) of {tool_type}, assignment carries {have}",
                    tool_type,
                )
            )
    for tool_type in sorted(set(provided) - set(task.step.required_tools)):
        violations.append(
            Violation(
                Rule.TOOL_SHORTAGE,
                f"assignment carries unneeded tool type {tool_type}",
                tool_type,
            )
        )

    # batching
    if cand.batch_session is not None:
        if station.batch is None:
            violations.append(
                Violation(
                    Rule.BATCH_INCOMPATIBLE,
                    f"station {station.id} does not run batch sessions",
                    station.id,
                )
            )
        else:
            key = station.batch.compatibility_key
            value = task.step.attrs.get(key)
            if value is None:
                violations.append(
                    Violation(
                        Rule.BATCH_INCOMPATIBLE,
                        f"task {task.id} carries no {key} attribute",
                        task.id,
                    )
                )
            session = board.sessions.get(cand.batch_session)
            if session is not None:
                members = [m for m in board.session_members[session.id] if m != cand.task_id]
                if value is not None and session.key_value != value:
                    violations.append(
                        Violation(
                            Rule.BATCH_INCOMPATIBLE,
                            f"session {session.id} runs {key}={session.key_value!r}, "
                            f"task carries {value!r}",
                            session.id,
                        )
                    )
                if (session.start, session.end) != (cand.start, cand.end):
                    violations.append(
                        Violation(
                            Rule.BATCH_INCOMPATIBLE,
                            f"session {session.id} spans [{session.start}, {session.end}), "
                            f"members must share it exactly",
                            session.id,
                        )
                    )
                if len(members) >= station.batch.max_slots:
                    violations.append(
                        Violation(
                            Rule.BATCH_FULL,
                            f"session {session.id} already holds {len(members)} of "
                            f"{station.batch.max_slots} slots",
                            session.id,
                        )
                    )

    # materials: consumption is withdrawal-only, so feasibility reduces to totals
    consumption = material_consumption(task)
    if consumption is not None:
        material_id, needed = consumption
        material = factory.materials_by_id.get(material_id)
        if material is None:
            raise UnknownEntityError("material", material_id)
        already = board.material_consumed(factory).get(material_id, 0)
        if cand.task_id in board.assignments:
            already -= needed
        if already + needed > material.on_hand:
            violations.append(
                Violation(
                    Rule.MATERIAL_SHORTAGE,
                    f"{material_id}: {already + needed} needed but only "
                    f"{material.on_hand} on hand",
                    material_id,
                )
            )

    violations.sort(key=Violation.sort_key)
    return violations


def material_balance(board, factory: FactoryModel, graph: TaskGraph):
    """Per-material running balance over time.

    Returns (events, first_negative) where events maps material id to a
    time-ordered list of (minute, delta, balance) and first_negative maps
    material id to the first minute its balance dips below zero (or None).
    """
    events: dict[str, list[tuple[int, int, int]]] = {m.id: [] for m in factory.materials}
    raw: dict[str, list[tuple[int, str, int]]] = {m.id: [] for m in factory.materials}
    for aid in sorted(board.assignments):
        cand = board.assignments[aid]
        task = graph.tasks[aid]
        consumption = material_consumption(task)
        if consumption is None:
            continue
        material_id, qty = consumption
        raw[material_id].append((cand.start, aid, qty))
    first_negative: dict[str, int | None] = {}
    for material in factory.materials:
        balance = material.on_hand
        flagged = None
        for minute, _aid, qty in sorted(raw[material.id]):
            balance -= qty
            events[material.id].append((minute, -qty, balance))
            if balance < 0 and flagged is None:
                flagged = minute
        first_negative[material.id] = flagged
    return events, first_negative
