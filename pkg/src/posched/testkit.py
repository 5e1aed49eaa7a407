"""Synthetic instance generation and desk-scale ground-truth oracles.

The generator covers every constraint feature behind toggles; the oracle
exhaustively enumerates placement sequences on tiny instances to ground
optimality-gap and slot-search-minimality claims.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from fractions import Fraction

from .board import (
    BACKWARD,
    FORWARD,
    GanttBoard,
    ShortageReport,
    SlotQuery,
    _Search,
    find_slot,
)
from .calendars import CalendarSpec, Shift, TimeWindow
from .errors import ConfigError, SearchSpaceTooLargeError
from .metrics import GoalWeights, compute_metrics, z_score
from .model import (
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
from .rules import eligible_resources
from .taskgraph import TaskGraph, expand_demand

CLASS_NAMES = ("cutting", "layup", "cure", "assembly", "inspect", "pack", "mill", "paint")

_WEEKDAYS = frozenset(range(5))
_WORKDAYS6 = frozenset(range(6))
_ALLDAYS = frozenset(range(7))


@dataclass(frozen=True)
class GenSpec:
    """Knobs for one synthetic instance; a fixed seed fixes the output."""

    seed: int = 0
    n_work_orders: int = 5
    n_capability_classes: int = 3
    stations_per_class: int = 2
    routing_length: tuple[int, int] = (2, 3)
    duration_range: tuple[int, int] = (30, 120)
    quantity_range: tuple[int, int] = (1, 3)
    due_tightness: float = 2.5
    horizon_days: int = 7
    tool_scarcity: float = 0.0
    material_scarcity: float = 0.0
    with_calendars: bool = True
    with_batching: bool = False
    with_crews: bool = False
    with_overlap: bool = False
    with_wo_deps: bool = False
    with_pausable: bool = False
    with_skills: bool = False
    per_quantity_share: float = 0.3

    def __post_init__(self) -> None:
        if self.n_work_orders < 1 or self.n_capability_classes < 1:
            raise ValueError("need at least one work order and one class")
        if self.routing_length[0] < 1 or self.routing_length[0] > self.routing_length[1]:
            raise ValueError("bad routing length range")
        if self.duration_range[0] < 1 or self.duration_range[0] > self.duration_range[1]:
            raise ValueError("bad duration range")


def _calendar_for(index: int, spec: GenSpec) -> CalendarSpec:
    if not spec.with_calendars:
        return CalendarSpec.always_on()
    kind = index % 3
    if kind == 0:
        return CalendarSpec.always_on()
    if kind == 1:
        return CalendarSpec(shifts=(Shift(_WORKDAYS6, 6 * 60, 22 * 60),))
    return CalendarSpec(shifts=(Shift(_WEEKDAYS, 8 * 60, 20 * 60),))


def gen_instance(spec: GenSpec) -> tuple[FactoryModel, DemandState]:
    """A factory plus demand exercising every toggled constraint feature."""
    rng = random.Random(spec.seed)
    classes = [CLASS_NAMES[i % len(CLASS_NAMES)] for i in range(spec.n_capability_classes)]
    # duplicate base names get an index suffix once the fixed list runs out
    seen: dict[str, int] = {}
    unique_classes = []
    for name in classes:
        seen[name] = seen.get(name, 0) + 1
        unique_classes.append(name if seen[name] == 1 else f"{name}{seen[name]}")
    classes = unique_classes

    batch_class = "cure" if spec.with_batching and "cure" in classes else None
    crew_class = "layup" if spec.with_crews and "layup" in classes else None
    tool_class = "cure" if "cure" in classes else classes[-1]

    horizon_start = datetime(2024, 9, 2)  # a Monday
    horizon = TimeWindow(horizon_start, horizon_start + timedelta(days=spec.horizon_days))

    widths = (40, 60, 72)
    stations = []
    for ci, cls in enumerate(classes):
        for si in range(spec.stations_per_class):
            attrs = {}
            if cls == "cutting":
                attrs["width"] = widths[si % len(widths)]
            stations.append(
                Station(
                    id=f"{cls}-{si + 1:02d}",
                    capability_class=cls,
                    capacity_attrs=attrs,
                    calendar=_calendar_for(ci + si, spec),
                    batch=BatchRule("recipe", rng.randint(2, 3)) if cls == batch_class else None,
                    crew=CrewRule(1, 2, {1: Fraction(1), 2: Fraction(3, 2)})
                    if cls == crew_class
                    else None,
                )
            )

    max_width = max(
        (s.capacity_attrs.get("width", 0) for s in stations if s.capability_class == "cutting"),
        default=0,
    )
    width_choices = tuple(w for w in (30, 50, 70) if w <= max_width)

    n_products = max(1, math.ceil(spec.n_work_orders / 2))
    products = []
    uses_tools = False
    for pi in range(n_products):
        length = rng.randint(*spec.routing_length)
        routing = []
        for sj in range(length):
            cls = classes[sj % len(classes)]
            duration = rng.randint(*spec.duration_range)
            attrs: dict[str, object] = {}
            tools: dict[str, int] = {}
            if cls == "cutting" and width_choices:
                attrs["width"] = rng.choice(width_choices)
            if cls == tool_class and spec.tool_scarcity >= 0 and rng.random() < 0.8:
                tools["mold"] = 1
                uses_tools = True
            if batch_class is not None and cls == batch_class:
                attrs["recipe"] = f"R{rng.randint(1, 2)}"
            routing.append(
                RoutingStep(
                    name=f"{cls}-{sj}",
                    capability_class=cls,
                    base_duration=duration,
                    duration_scaling="per_quantity"
                    if rng.random() < spec.per_quantity_share
                    else "fixed",
                    required_tools=tools,
                    required_material=("resin", 1) if sj == 0 else None,
                    required_skill=f"op-{cls}" if spec.with_skills else None,
                    overlap_fraction=Fraction(1, 2)
                    if spec.with_overlap and sj > 0 and rng.random() < 0.5
                    else Fraction(1),
                    attrs=attrs,
                    pausable=spec.with_pausable and cls == tool_class,
                )
            )
        products.append(Product(f"KT-{pi + 1:03d}", tuple(routing)))

    orders = []
    total_requirement = 0
    chain_minutes: dict[str, int] = {}
    for wi in range(spec.n_work_orders):
        product = products[wi % len(products)]
        quantity = rng.randint(*spec.quantity_range)
        work = 0
        for step in product.routing:
            base = step.base_duration * (quantity if step.duration_scaling == "per_quantity" else 1)
            work += base
        due_minute = int(work * spec.due_tightness * rng.uniform(0.9, 1.5))
        due_minute = max(60, min(due_minute, horizon.minutes + horizon.minutes // 2))
        wo_id = f"WO-{1001 + wi}"
        orders.append(
            WorkOrder(
                id=wo_id,
                quantity=quantity,
                product_id=product.id,
                due_date=horizon.to_datetime(due_minute),
                priority=rng.choices(["High", "Regular", "Low"], weights=[3, 5, 2])[0],
            )
        )
        chain_minutes[wo_id] = work
        first = product.routing[0]
        if first.required_material is not None:
            total_requirement += first.required_material[1] * quantity

    on_hand = total_requirement
    if spec.material_scarcity > 0:
        on_hand = int(math.ceil(total_requirement * (1.0 - spec.material_scarcity)))
    materials = (Material("resin", on_hand),)

    tools = ()
    if uses_tools:
        ample = 2 * spec.stations_per_class
        count = max(1, int(round(ample * (1.0 - spec.tool_scarcity))))
        tools = (ToolType("mold", count),)

    workers = []
    pool = max(2, 2 * spec.stations_per_class)
    for wi in range(pool):
        skills = {"general"}
        if spec.with_skills:
            skills |= {f"op-{cls}" for cls in classes[wi % 2 :: 2]}
        workers.append(
            Worker(
                id=f"w-{wi + 1:02d}",
                skills=frozenset(skills),
                calendar=_calendar_for(wi, spec),
            )
        )

    wo_dependencies = ()
    if spec.with_wo_deps and spec.n_work_orders >= 2:
        pairs = []
        for _ in range(max(1, spec.n_work_orders // 4)):
            i = rng.randrange(0, spec.n_work_orders - 1)
            j = rng.randrange(i + 1, spec.n_work_orders)
            pairs.append((f"WO-{1001 + i}", f"WO-{1001 + j}"))
        wo_dependencies = tuple(sorted(set(pairs)))

    factory = FactoryModel(
        horizon=horizon,
        stations=tuple(stations),
        tools=tools,
        workers=tuple(workers),
        materials=materials,
        products=tuple(products),
        wo_dependencies=wo_dependencies,
    )
    return factory, DemandState(tuple(orders))


# -- minute-scan slot oracle ---------------------------------------------


def minute_scan_slot(query: SlotQuery, board, factory, graph):
    """Brute-force reference for find_slot: try every minute in order.

    Shares the window validator (and therefore the worker/tool pick policy
    and tie-breaks) with the production search; only the candidate-point
    reduction is independent and under test.
    """
    search = _Search(query, board, factory, graph)
    search.elig = eligible_resources(search.task, factory)
    stations = search.elig.stations
    if query.station_ids is not None:
        allowed = set(query.station_ids)
        stations = tuple(s for s in stations if s.id in allowed)
    step = search.task.step
    horizon = factory.horizon.minutes
    lower = search.precedence_lower()

    def window_at(station, start, crew):
        cal = search.cache.station(station)
        if not cal.contains_minute(start):
            return None
        from .rules import effective_duration

        duration = effective_duration(search.task, station, crew)
        if step.pausable:
            end = cal.span_forward(start, duration)
        else:
            end = start + duration if cal.contains_span(start, start + duration) else None
        if end is None or end > horizon:
            return None
        return search.try_window(station, start, end, crew)

    def crew_options(station):
        if station.crew is not None:
            sizes = list(station.crew.sizes())
        elif step.required_skill is not None:
            sizes = [1]
        else:
            sizes = [0]
        if query.preferred_crew is not None:
            sizes = [s for s in sizes if s == query.preferred_crew]
        return sizes

    candidates = []
    if query.direction == FORWARD:
        for station in stations:
            for start in range(lower, horizon):
                chosen = None
                for crew in crew_options(station):
                    cand = window_at(station, start, crew)
                    if cand is not None and (chosen is None or (cand.end, crew) < chosen[:2]):
                        chosen = (cand.end, crew, cand)
                if chosen is not None:
                    candidates.append(chosen[2])
                    break
        for sid in sorted(board.sessions):
            session = board.sessions[sid]
            station = next((s for s in stations if s.id == session.station_id), None)
            if station is None or session.start < lower:
                continue
            for crew in crew_options(station):
                cand = search.try_window(station, session.start, session.end, crew, session_id=sid)
                if cand is not None:
                    candidates.append(cand)
                    break
        if not candidates:
            return None
        fresh = [c for c in candidates if c.batch_session is None]
        joins = [c for c in candidates if c.batch_session is not None]
        best_fresh = min(
            fresh, key=lambda c: (c.start, c.station_id, c.worker_ids, c.tool_ids), default=None
        )
        best_join = min(
            joins, key=lambda c: (c.start, c.station_id, c.batch_session), default=None
        )
        if best_join is not None and (best_fresh is None or best_join.start <= best_fresh.start):
            return best_join
        return best_fresh
    else:
        upper = horizon if query.not_after is None else min(query.not_after, horizon)
        for station in stations:
            for end_point in range(upper, 0, -1):
                cal = search.cache.station(station)
                if not cal.contains_minute(end_point - 1):
                    continue
                chosen = None
                for crew in crew_options(station):
                    from .rules import effective_duration

                    duration = effective_duration(search.task, station, crew)
                    if step.pausable:
                        start = cal.span_backward(end_point, duration)
                    else:
                        start = (
                            end_point - duration
                            if cal.contains_span(end_point - duration, end_point)
                            else None
                        )
                    if start is None or start < 0:
                        continue
                    cand = search.try_window(station, start, end_point, crew)
                    if cand is not None and (chosen is None or (-cand.start, crew) < chosen[:2]):
                        chosen = (-cand.start, crew, cand)
                if chosen is not None:
                    candidates.append(chosen[2])
                    break
        if not candidates:
            return None
        return min(candidates, key=lambda c: (-c.end, c.station_id, c.worker_ids, c.tool_ids))


# -- exhaustive best-schedule oracle ---------------------------------------


@dataclass
class _OracleState:
    board: GanttBoard
    unscheduled: set[str]
    nodes: int = 0


def _estimate_space(graph: TaskGraph, factory: FactoryModel) -> float:
    estimate = math.factorial(min(len(graph.tasks), 20))
    for task in graph.tasks.values():
        choices = 0
        for station in factory.stations:
            if station.capability_class != task.step.capability_class:
                continue
            choices += len(list(station.crew.sizes())) if station.crew else 1
        estimate *= max(1, choices)
    return float(estimate)


def oracle_best(
    factory: FactoryModel,
    demand: DemandState,
    weights: GoalWeights | None = None,
    grid_step: int = 1,
    node_cap: int = 2_000_000,
    space_cap: float = 5e12,
):
    """Exhaustive max-Z search over task orderings, stations, and crews.

    Placements are earliest-feasible per choice, which is exhaustive for
    goal mixes that never reward delaying work (compliance, makespan,
    throughput, unscheduled count). Batching stations are out of the
    oracle's scope. grid_step > 1 restricts starts to grid multiples
    (coarser, no longer exact).
    """
    if weights is None:
        weights = GoalWeights.ranked(["due_date_compliance", "unscheduled_tasks", "makespan"])
    weights.validate()
    for name in weights.effective():
        if name.startswith("utilization") or name == "avg_machine_utilization":
            raise ConfigError("oracle supports regular goal mixes only (no utilization)")
    if any(s.batch is not None for s in factory.stations):
        raise ConfigError("oracle does not support batching stations")
    graph = expand_demand(demand, factory)
    estimate = _estimate_space(graph, factory)
    if estimate > space_cap:
        raise SearchSpaceTooLargeError(estimate, space_cap)

    horizon = factory.horizon.minutes
    due_minutes = {wo.id: factory.horizon.to_minute(wo.due_date) for wo in demand.work_orders}
    n_wos = max(1, len(demand.work_orders))
    total_tasks = max(1, len(graph.tasks))
    effective = weights.effective()
    weight_sum = sum(effective.values())

    def station_signature(station):
        crew = station.crew
        return (
            station.capability_class,
            tuple(sorted(station.capacity_attrs.items())),
            station.calendar,
            None
            if crew is None
            else (crew.min_workers, crew.max_workers, tuple(sorted(crew.productivity.items()))),
        )

    best_state: dict = {"z": None, "board": None}

    def leaf(state: _OracleState) -> None:
        metrics = compute_metrics(state.board, demand, factory, graph)
        z = z_score(metrics, weights)
        if best_state["z"] is None or z > best_state["z"]:
            best_state["z"] = z
            best_state["board"] = state.board.clone()

    def upper_bound(state: _OracleState) -> Fraction:
        """Optimistic Z if everything still open lands on time right now."""
        late_or_out = set()
        for wo in demand.work_orders:
            chain = graph.wo_tasks[wo.id]
            if any(tid in state.unscheduled for tid in chain):
                late_or_out.add(wo.id)
                continue
            for tid in chain:
                cand = state.board.assignments.get(tid)
                if cand is not None and cand.end > due_minutes[wo.id]:
                    late_or_out.add(wo.id)
                    break
        makespan = max((c.end for c in state.board.assignments.values()), default=0)
        consumed = sum(state.board.material_consumed(factory).values())
        total = Fraction(0)
        for name, weight in effective.items():
            if name == "due_date_compliance":
                value = Fraction(n_wos - len(late_or_out), n_wos)
            elif name == "makespan":
                value = 1 - Fraction(makespan, max(1, horizon))
            elif name == "throughput_wos":
                value = Fraction(n_wos - sum(
                    1 for wo in demand.work_orders
                    if any(t in state.unscheduled for t in graph.wo_tasks[wo.id])
                ), n_wos)
            elif name == "throughput_units":
                value = Fraction(1)
            elif name == "material_consumption":
                req = max(1, sum(
                    t.step.required_material[1] * t.quantity
                    for t in graph.tasks.values()
                    if t.step.required_material
                ))
                value = 1 - Fraction(consumed, req)
            elif name == "unscheduled_tasks":
                value = 1 - Fraction(len(state.unscheduled), total_tasks)
            else:
                value = Fraction(1)
            total += weight * max(Fraction(0), min(Fraction(1), value))
        return total / weight_sum

    def mark_unscheduled(state: _OracleState, task_id: str) -> list[str]:
        marked = []
        queue = [task_id]
        while queue:
            tid = queue.pop()
            if tid in state.unscheduled:
                continue
            state.unscheduled.add(tid)
            marked.append(tid)
            for succ, _ in graph.successors.get(tid, ()):
                if succ not in state.board.assignments:
                    queue.append(succ)
        return marked

    def aligned_slot(tid: str, station_id: str, crew: int):
        not_before = 0
        while True:
            result = find_slot(
                SlotQuery(
                    tid, FORWARD, not_before=not_before,
                    preferred_crew=crew if crew > 0 else None,
                    station_ids=(station_id,),
                ),
                state.board, factory, graph,
            )
            if isinstance(result, ShortageReport):
                return None
            if grid_step <= 1 or result.start % grid_step == 0:
                return result
            not_before = ((result.start // grid_step) + 1) * grid_step
            if not_before >= horizon:
                return None

    state = _OracleState(board=GanttBoard(), unscheduled=set())

    def ready_tasks() -> list[str]:
        out = []
        for tid, task in graph.tasks.items():
            if tid in state.board.assignments or tid in state.unscheduled:
                continue
            if all(p in state.board.assignments for p, _ in task.predecessors):
                out.append(tid)
        return sorted(out)

    def explore() -> None:
        state.nodes += 1
        if state.nodes > node_cap:
            raise SearchSpaceTooLargeError(float(state.nodes), float(node_cap))
        if best_state["z"] is not None and upper_bound(state) <= best_state["z"]:
            return
        ready = ready_tasks()
        if not ready:
            open_tasks = [
                tid for tid in graph.tasks
                if tid not in state.board.assignments and tid not in state.unscheduled
            ]
            for tid in open_tasks:  # only reachable via cyclic deps; defensive
                mark_unscheduled(state, tid)
            leaf(state)
            return
        for tid in ready:
            task = graph.tasks[tid]
            placed_any = False
            seen_sigs = set()
            for station in factory.stations:
                if station.capability_class != task.step.capability_class:
                    continue
                sig = station_signature(station)
                if not state.board.busy_entries("st", station.id):
                    if sig in seen_sigs:
                        continue
                    seen_sigs.add(sig)
                crews = list(station.crew.sizes()) if station.crew else [0]
                for crew in crews:
                    cand = aligned_slot(tid, station.id, crew)
                    if cand is None:
                        continue
                    placed_any = True
                    stored = state.board.place(cand, factory, graph)
                    explore()
                    state.board.remove([stored.task_id])
            if not placed_any:
                marked = mark_unscheduled(state, tid)
                explore()
                for m in marked:
                    state.unscheduled.discard(m)

    explore()
    if best_state["board"] is None:
        # every task unschedulable: the empty board is the witness
        empty = GanttBoard()
        metrics = compute_metrics(empty, demand, factory, graph)
        return z_score(metrics, weights), empty
    return best_state["z"], best_state["board"]
