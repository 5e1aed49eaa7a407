"""Macro and micro schedule metrics, and their collapse into the Z score."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .calendars import build_calendar
from .errors import NoPositiveWeightError, UnknownMetricError
from .model import PRIORITIES, DemandState, FactoryModel
from .taskgraph import TaskGraph, expand_demand

HIGHER = "higher"
LOWER = "lower"

# metric name -> direction that counts as better
MACRO_DIRECTIONS = {
    "due_date_compliance": HIGHER,
    "makespan": LOWER,
    "throughput_wos": HIGHER,
    "throughput_units": HIGHER,
    "avg_machine_utilization": HIGHER,
    "material_consumption": LOWER,
    "unscheduled_tasks": LOWER,
}

UTILIZATION_PREFIX = "utilization:"


@dataclass(frozen=True)
class MetricsContext:
    """Fixed normalizers so Z stays comparable across one run's schedules."""

    horizon_minutes: int
    total_wos: int
    total_tasks: int
    total_quantity: int
    total_material_requirement: int


@dataclass(frozen=True)
class MetricsBundle:
    due_date_compliance: Fraction
    makespan: int
    throughput_wos: int
    throughput_units: int
    avg_machine_utilization: Fraction
    material_consumption: int
    unscheduled_tasks: int
    station_utilization: dict[str, Fraction]
    capability_utilization: dict[str, Fraction]
    wo_lateness: dict[str, int | None]
    wo_slack: dict[str, int | None]
    priority_compliance: dict[str, Fraction]
    tool_peak_usage: dict[str, int]
    context: MetricsContext

    def macro(self) -> dict[str, Fraction | int]:
        return {
            "due_date_compliance": self.due_date_compliance,
            "makespan": self.makespan,
            "throughput_wos": self.throughput_wos,
            "throughput_units": self.throughput_units,
            "avg_machine_utilization": self.avg_machine_utilization,
            "material_consumption": self.material_consumption,
            "unscheduled_tasks": self.unscheduled_tasks,
        }


@dataclass(frozen=True)
class GoalWeights:
    """Weighted mix of macro goals; rank mode maps rank r to weight 10^(1-r)."""

    weights: dict[str, Fraction] = field(default_factory=dict)
    rank: tuple[str, ...] = ()
    directions: dict[str, str] = field(default_factory=dict)

    @staticmethod
    def single(name: str) -> "GoalWeights":
        return GoalWeights(weights={name: Fraction(1)})

    @staticmethod
    def ranked(names) -> "GoalWeights":
        return GoalWeights(rank=tuple(names))

    def effective(self) -> dict[str, Fraction]:
        if self.rank:
            out = {}
            for position, name in enumerate(self.rank, start=1):
                out[name] = Fraction(1, 10 ** (position - 1))
            return out
        return {k: Fraction(v) for k, v in self.weights.items()}

    def validate(self) -> None:
        effective = self.effective()
        if not effective or not any(w > 0 for w in effective.values()):
            raise NoPositiveWeightError()
        for name, weight in effective.items():
            if weight < 0:
                raise NoPositiveWeightError()
            _ = name


def _merged_minutes(spans: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, e in sorted(spans):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def compute_metrics(
    board,
    demand: DemandState,
    factory: FactoryModel,
    graph: TaskGraph | None = None,
) -> MetricsBundle:
    """Every macro and micro metric of a board, computed from scratch."""
    if graph is None:
        graph = expand_demand(demand, factory)
    horizon_minutes = factory.horizon.minutes

    total_quantity = sum(wo.quantity for wo in demand.work_orders)
    total_requirement = 0
    for task in graph.tasks.values():
        req = task.step.required_material
        if req is not None:
            total_requirement += req[1] * task.quantity
    context = MetricsContext(
        horizon_minutes=horizon_minutes,
        total_wos=len(demand.work_orders),
        total_tasks=len(graph.tasks),
        total_quantity=total_quantity,
        total_material_requirement=total_requirement,
    )

    due_minutes = {wo.id: factory.horizon.to_minute(wo.due_date) for wo in demand.work_orders}

    # per-work-order completion
    wo_lateness: dict[str, int | None] = {}
    wo_slack: dict[str, int | None] = {}
    on_time: set[str] = set()
    complete: set[str] = set()
    for wo in demand.work_orders:
        chain = graph.wo_tasks[wo.id]
        placed = [board.assignments.get(tid) for tid in chain]
        if all(p is not None for p in placed):
            completion = max(p.end for p in placed)
            lateness = completion - due_minutes[wo.id]
            wo_lateness[wo.id] = lateness
            wo_slack[wo.id] = max(0, -lateness)
            complete.add(wo.id)
            if lateness <= 0:
                on_time.add(wo.id)
        else:
            wo_lateness[wo.id] = None
            wo_slack[wo.id] = None

    n_wos = len(demand.work_orders)
    compliance = Fraction(len(on_time), n_wos) if n_wos else Fraction(1)

    makespan = max((a.end for a in board.assignments.values()), default=0)

    throughput_wos = len(complete)
    throughput_units = sum(wo.quantity for wo in demand.work_orders if wo.id in complete)

    # utilization: working minutes occupied / calendar minutes, batch spans once
    station_spans: dict[str, list[tuple[int, int]]] = {s.id: [] for s in factory.stations}
    for a in board.assignments.values():
        station_spans[a.station_id].append((a.start, a.end))
    station_utilization: dict[str, Fraction] = {}
    busy_total = 0
    avail_total = 0
    busy_by_class: dict[str, int] = {}
    avail_by_class: dict[str, int] = {}
    for station in factory.stations:
        cal = build_calendar(station.calendar, factory.horizon)
        available = cal.total()
        busy = sum(cal.covered(s, e) for s, e in _merged_minutes(station_spans[station.id]))
        station_utilization[station.id] = (
            Fraction(busy, available) if available else Fraction(0)
        )
        busy_total += busy
        avail_total += available
        busy_by_class[station.capability_class] = (
            busy_by_class.get(station.capability_class, 0) + busy
        )
        avail_by_class[station.capability_class] = (
            avail_by_class.get(station.capability_class, 0) + available
        )
    avg_utilization = Fraction(busy_total, avail_total) if avail_total else Fraction(0)
    capability_utilization = {
        cls: (Fraction(busy_by_class[cls], avail_by_class[cls]) if avail_by_class[cls] else Fraction(0))
        for cls in sorted(avail_by_class)
    }

    consumption = sum(board.material_consumed(factory).values())

    unscheduled = len(graph.tasks) - len(
        [tid for tid in board.assignments if tid in graph.tasks]
    )

    priority_compliance: dict[str, Fraction] = {}
    for cls in PRIORITIES:
        members = [wo.id for wo in demand.work_orders if wo.priority == cls]
        if members:
            priority_compliance[cls] = Fraction(
                sum(1 for m in members if m in on_time), len(members)
            )

    # peak concurrent units in use per tool type
    tool_events: dict[str, list[tuple[int, int]]] = {}
    for a in board.assignments.values():
        for unit in a.tool_ids:
            tool_type = factory.tool_unit_types[unit]
            tool_events.setdefault(tool_type, []).append((a.start, 1))
            tool_events.setdefault(tool_type, []).append((a.end, -1))
    tool_peak: dict[str, int] = {}
    for tool_type, events in sorted(tool_events.items()):
        level = peak = 0
        for _, delta in sorted(events):
            level += delta
            peak = max(peak, level)
        tool_peak[tool_type] = peak

    return MetricsBundle(
        due_date_compliance=compliance,
        makespan=makespan,
        throughput_wos=throughput_wos,
        throughput_units=throughput_units,
        avg_machine_utilization=avg_utilization,
        material_consumption=consumption,
        unscheduled_tasks=unscheduled,
        station_utilization=station_utilization,
        capability_utilization=capability_utilization,
        wo_lateness=wo_lateness,
        wo_slack=wo_slack,
        priority_compliance=priority_compliance,
        tool_peak_usage=tool_peak,
        context=context,
    )


def _clamp01(value: Fraction) -> Fraction:
    return max(Fraction(0), min(Fraction(1), value))


def normalized_metric(m: MetricsBundle, name: str) -> Fraction:
    """Metric value rescaled to [0, 1] in higher-is-better orientation."""
    ctx = m.context
    if name == "due_date_compliance":
        return _clamp01(m.due_date_compliance)
    if name == "makespan":
        if ctx.horizon_minutes == 0:
            return Fraction(1)
        return _clamp01(1 - Fraction(m.makespan, ctx.horizon_minutes))
    if name == "throughput_wos":
        if ctx.total_wos == 0:
            return Fraction(1)
        return _clamp01(Fraction(m.throughput_wos, ctx.total_wos))
    if name == "throughput_units":
        if ctx.total_quantity == 0:
            return Fraction(1)
        return _clamp01(Fraction(m.throughput_units, ctx.total_quantity))
    if name == "avg_machine_utilization":
        return _clamp01(m.avg_machine_utilization)
    if name == "material_consumption":
        if ctx.total_material_requirement == 0:
            return Fraction(1)
        return _clamp01(1 - Fraction(m.material_consumption, ctx.total_material_requirement))
    if name == "unscheduled_tasks":
        if ctx.total_tasks == 0:
            return Fraction(1)
        return _clamp01(1 - Fraction(m.unscheduled_tasks, ctx.total_tasks))
    if name.startswith(UTILIZATION_PREFIX):
        cls = name[len(UTILIZATION_PREFIX):]
        value = m.capability_utilization.get(cls)
        if value is None:
            raise UnknownMetricError(name)
        return _clamp01(value)
    raise UnknownMetricError(name)


def z_score(m: MetricsBundle, weights: GoalWeights) -> Fraction:
    """Weighted normalized mix of macro goals; always lands in [0, 1]."""
    weights.validate()
    effective = weights.effective()
    numerator = Fraction(0)
    denominator = Fraction(0)
    for name in sorted(effective):
        weight = effective[name]
        if weight == 0:
            continue
        norm = normalized_metric(m, name)
        direction = weights.directions.get(name)
        if direction == LOWER:
            norm = 1 - norm
        numerator += weight * norm
        denominator += weight
    return numerator / denominator
