"""Virtual expert agents: deterministic construction passes over the demand.

Each agent encodes one scheduling school of thought (forward dispatch,
backward from due dates, bottleneck-first) and turns a demand plus an
initial board into one complete valid schedule per iteration.
"""

from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .board import BACKWARD, FORWARD, GanttBoard, ShortageReport, SlotQuery, find_slot, revalidate
from .errors import InvalidInitialBoardError
from .metrics import MetricsBundle, compute_metrics
from .model import DemandState, FactoryModel, WorkOrder
from .rules import CandidateAssignment, ceil_fraction
from .taskgraph import TaskGraph

STRATEGY_FORWARD = "Forward"
STRATEGY_BACKWARD = "Backward"
STRATEGY_BOTTLENECK = "Bottleneck"

EDD = "EDD"
SPT = "SPT"
CRITICAL_RATIO = "CriticalRatio"
PRIORITY_CLASS = "PriorityClass"
BOTTLENECK_LOAD = "BottleneckLoad"
ATTAINABLE_DUE = "AttainableDue"

_PRIORITY_SCORE = {"High": Fraction(0), "Regular": Fraction(1, 2), "Low": Fraction(1)}


@dataclass(frozen=True)
class VheDescriptor:
    id: int
    name: str
    strategy: str
    policy: str
    description: str
    noisy: bool = False


_CORE_VHES = (
    VheDescriptor(1, "FWD-EDD", STRATEGY_FORWARD, EDD,
                  "forward construction, earliest due date first"),
    VheDescriptor(2, "FWD-SPT", STRATEGY_FORWARD, SPT,
                  "forward construction, shortest total processing first"),
    VheDescriptor(3, "FWD-CR", STRATEGY_FORWARD, CRITICAL_RATIO,
                  "forward construction, most critical time-to-work ratio first"),
    VheDescriptor(4, "FWD-PRIORITY", STRATEGY_FORWARD, PRIORITY_CLASS,
                  "forward construction, high priority class first"),
    VheDescriptor(5, "BWD-DUE", STRATEGY_BACKWARD, EDD,
                  "backward placement from due dates, earliest due date first"),
    VheDescriptor(6, "BOTTLENECK", STRATEGY_BOTTLENECK, BOTTLENECK_LOAD,
                  "sequence the most loaded station class first, then fill around it"),
    VheDescriptor(7, "FWD-HODGSON", STRATEGY_FORWARD, ATTAINABLE_DUE,
                  "earliest due date first, but orders that can no longer meet "
                  "their due date yield to ones that still can"),
)

_NOISY_VHE = VheDescriptor(
    8, "NOISY-EDD", STRATEGY_FORWARD, EDD,
    "forward earliest-due-date with seeded tie shuffling", noisy=True,
)


def registry(include_noisy: bool = False) -> tuple[VheDescriptor, ...]:
    """The stable agent catalog, ordered by id."""
    if include_noisy:
        return _CORE_VHES + (_NOISY_VHE,)
    return _CORE_VHES


def vhe_by_name(name: str) -> VheDescriptor:
    for vhe in registry(include_noisy=True):
        if vhe.name == name:
            return vhe
    raise KeyError(name)


def vhe_by_id(vhe_id: int) -> VheDescriptor:
    for vhe in registry(include_noisy=True):
        if vhe.id == vhe_id:
            return vhe
    raise KeyError(vhe_id)


@dataclass
class WoStats:
    """Per-work-order figures the ordering policies read."""

    due_minute: int
    total_minutes: int
    remaining_minutes: int
    bottleneck_minutes: int
    horizon_minutes: int
    max_total_minutes: int
    max_bottleneck_minutes: int


def _clamp(value: Fraction, lo: Fraction, hi: Fraction) -> Fraction:
    return max(lo, min(hi, value))


def ordering_key(
    vhe: VheDescriptor,
    wo: WorkOrder,
    urgency: Fraction,
    clock: int,
    stats: WoStats,
) -> tuple[Fraction, str]:
    """Totally ordered dispatch key; smaller schedules sooner.

    The policy produces a normalized base score in [0, 1]; urgency shifts it
    down (rewarded orders overtake) and the work-order id breaks ties.
    """
    policy = vhe.policy
    if policy == EDD:
        score = _clamp(
            Fraction(stats.due_minute, max(1, stats.horizon_minutes)), Fraction(0), Fraction(1)
        )
    elif policy == SPT:
        if stats.max_total_minutes <= 0:
            score = Fraction(0)
        else:
            score = Fraction(stats.total_minutes, stats.max_total_minutes)
    elif policy == CRITICAL_RATIO:
        if stats.remaining_minutes <= 0:
            score = Fraction(1)
        else:
            ratio = Fraction(stats.due_minute - clock, stats.remaining_minutes)
            score = _clamp(ratio, Fraction(0), Fraction(2)) / 2
    elif policy == PRIORITY_CLASS:
        score = _PRIORITY_SCORE[wo.priority]
    elif policy == ATTAINABLE_DUE:
        score = _clamp(
            Fraction(stats.due_minute, max(1, stats.horizon_minutes)), Fraction(0), Fraction(1)
        ) / 2
        if clock + stats.remaining_minutes > stats.due_minute:
            score += Fraction(1, 2)  # due date no longer attainable: yield
    elif policy == BOTTLENECK_LOAD:
        if stats.max_bottleneck_minutes <= 0:
            score = Fraction(1)
        else:
            score = 1 - Fraction(stats.bottleneck_minutes, stats.max_bottleneck_minutes)
    else:
        raise ValueError(f"unknown ordering policy {policy!r}")
    return (score - urgency, wo.id)


@dataclass(frozen=True)
class ScheduleRecord:
    """One complete valid schedule: board, metrics, provenance."""

    vhe_id: int
    iteration: int
    board: GanttBoard
    unscheduled: tuple[tuple[str, ShortageReport], ...]
    metrics: MetricsBundle
    demand_snapshot: dict[str, Fraction]
    seed: int
    placement_order: tuple[str, ...]
    build_seconds: float
    placements_tried: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.vhe_id, self.iteration)


class _IterationState:
    """Mutable bookkeeping for one construction pass."""

    def __init__(self, vhe, demand, factory, graph, board, seed, iteration):
        self.vhe = vhe
        self.demand = demand
        self.factory = factory
        self.graph = graph
        self.board = board
        self.horizon = factory.horizon.minutes
        self.placement_order: list[str] = []
        self.unscheduled: dict[str, ShortageReport] = {}
        self.tried = 0
        self.frontier = 0
        self.wos = {wo.id: wo for wo in demand.work_orders}
        self.due_minute = {
            wo.id: factory.horizon.to_minute(wo.due_date) for wo in demand.work_orders
        }
        totals: dict[str, int] = {wo.id: 0 for wo in demand.work_orders}
        for task in graph.tasks.values():
            totals[task.wo_id] += task.base_minutes
        self.stats: dict[str, WoStats] = {}
        max_total = max(totals.values(), default=0)
        loads = self._class_loads()
        self.bottleneck_class = (
            max(sorted(loads), key=lambda c: loads[c]) if loads else None
        )
        per_wo_bottleneck: dict[str, int] = {wo.id: 0 for wo in demand.work_orders}
        for task in graph.tasks.values():
            if task.step.capability_class == self.bottleneck_class:
                per_wo_bottleneck[task.wo_id] += task.base_minutes
        max_bottleneck = max(per_wo_bottleneck.values(), default=0)
        for wo in demand.work_orders:
            remaining = sum(
                graph.tasks[tid].base_minutes
                for tid in graph.wo_tasks[wo.id]
                if tid not in board.assignments
            )
            self.stats[wo.id] = WoStats(
                due_minute=self.due_minute[wo.id],
                total_minutes=totals[wo.id],
                remaining_minutes=remaining,
                bottleneck_minutes=per_wo_bottleneck[wo.id],
                horizon_minutes=self.horizon,
                max_total_minutes=max_total,
                max_bottleneck_minutes=max_bottleneck,
            )
        if vhe.noisy:
            rng = random.Random(f"{seed}:{vhe.id}:{iteration}")
            self.noise = {wo.id: rng.random() for wo in sorted_wos(demand)}
        else:
            self.noise = None

    def _class_loads(self) -> dict[str, int]:
        loads: dict[str, int] = {}
        for task in self.graph.tasks.values():
            if task.id in self.board.assignments:
                continue
            cls = task.step.capability_class
            loads[cls] = loads.get(cls, 0) + task.base_minutes
        return loads

    def key_for(self, wo_id: str, clock: int):
        wo = self.wos[wo_id]
        base = ordering_key(
            self.vhe, wo, self.demand.urgency[wo_id], clock, self.stats[wo_id]
        )
        if self.noise is not None:
            return (base[0], self.noise[wo_id], base[1])
        return base

    def place(self, cand: CandidateAssignment) -> None:
        stored = self.board.place(cand, self.factory, self.graph)
        self.placement_order.append(stored.task_id)
        self.frontier = max(self.frontier, stored.start)
        task = self.graph.tasks[stored.task_id]
        self.stats[task.wo_id].remaining_minutes -= task.base_minutes

    def mark_unscheduled(self, task_id: str, report: ShortageReport) -> None:
        """Record the failure and propagate it to every unplaced dependent."""
        queue = [(task_id, report)]
        while queue:
            tid, rep = queue.pop(0)
            if tid in self.unscheduled:
                continue
            self.unscheduled[tid] = replace(rep, task_id=tid)
            for succ, _ in self.graph.successors.get(tid, ()):
                if succ not in self.board.assignments and succ not in self.unscheduled:
                    blocked = replace(
                        rep,
                        task_id=succ,
                        detail=f"blocked by unscheduled predecessor {tid}",
                    )
                    queue.append((succ, blocked))


def sorted_wos(demand: DemandState) -> list[WorkOrder]:
    return sorted(demand.work_orders, key=lambda wo: wo.id)


def _forward_fill(state: _IterationState, pool: set[str]) -> None:
    """Dispatch loop: repeatedly place the ready task of the best-ranked order.

    Static ordering policies use a lazy heap over work orders; the critical
    ratio policy re-ranks the ready orders whenever the frontier moves.
    """
    graph = state.graph
    dynamic = state.vhe.policy in (CRITICAL_RATIO, ATTAINABLE_DUE)
    pending: dict[str, int] = {}
    ready_by_wo: dict[str, list[tuple[int, str]]] = {}
    ready_count = 0
    static_keys: dict[str, tuple] = {}
    wo_heap: list[tuple] = []

    def push_ready(tid: str) -> None:
        nonlocal ready_count
        task = graph.tasks[tid]
        entries = ready_by_wo.setdefault(task.wo_id, [])
        if not entries and not dynamic:
            key = static_keys.get(task.wo_id)
            if key is None:
                key = state.key_for(task.wo_id, 0)
                static_keys[task.wo_id] = key
            heapq.heappush(wo_heap, (key, task.wo_id))
        heapq.heappush(entries, (task.step_index, tid))
        ready_count += 1

    for tid in sorted(pool):
        task = graph.tasks[tid]
        missing = sum(
            1 for pred, _ in task.predecessors if pred not in state.board.assignments
        )
        pending[tid] = missing
        if missing == 0:
            push_ready(tid)

    while ready_count > 0:
        if dynamic:
            clock = state.frontier
            best_wo = None
            best_key = None
            for wo_id, entries in ready_by_wo.items():
                if not entries:
                    continue
                key = state.key_for(wo_id, clock)
                if best_key is None or key < best_key:
                    best_key = key
                    best_wo = wo_id
        else:
            while True:
                _, best_wo = wo_heap[0]
                if ready_by_wo.get(best_wo):
                    break
                heapq.heappop(wo_heap)  # order went quiet; drop the stale entry
        _, tid = heapq.heappop(ready_by_wo[best_wo])
        if not ready_by_wo[best_wo]:
            del ready_by_wo[best_wo]
            if not dynamic and wo_heap and wo_heap[0][1] == best_wo:
                heapq.heappop(wo_heap)
        ready_count -= 1

        if tid in state.unscheduled:
            continue
        state.tried += 1
        result = find_slot(SlotQuery(tid, FORWARD), state.board, state.factory, graph)
        if isinstance(result, ShortageReport):
            state.mark_unscheduled(tid, result)
            continue
        state.place(result)
        for succ, _ in graph.successors.get(tid, ()):
            if succ in pending:
                pending[succ] -= 1
                if pending[succ] == 0 and succ not in state.unscheduled:
                    push_ready(succ)


def _backward_fill(state: _IterationState) -> None:
    """Per order, place tasks last step first as late as their due date allows,
    falling back to forward placement when a task underflows the horizon."""
    graph = state.graph
    order = sorted(state.wos, key=lambda wo_id: state.key_for(wo_id, 0))
    for wo_id in order:
        due = min(state.due_minute[wo_id], state.horizon)
        for tid in reversed(graph.wo_tasks[wo_id]):
            if tid in state.board.assignments or tid in state.unscheduled:
                continue
            state.tried += 1
            result = find_slot(
                SlotQuery(tid, BACKWARD, not_after=due), state.board, state.factory, graph
            )
            if isinstance(result, ShortageReport) and not result.terminal:
                state.tried += 1
                result = find_slot(SlotQuery(tid, FORWARD), state.board, state.factory, graph)
            if isinstance(result, ShortageReport):
                state.unscheduled[tid] = result
                continue
            state.place(result)


def _head_offsets(state: _IterationState) -> dict[str, int]:
    """Earliest chain-relative start of each task, resource contention aside."""
    heads: dict[str, int] = {}
    for chain in state.graph.wo_tasks.values():
        offset = 0
        for idx, tid in enumerate(chain):
            heads[tid] = offset
            if idx + 1 < len(chain):
                task = state.graph.tasks[tid]
                nxt = state.graph.tasks[chain[idx + 1]]
                fraction = next(f for p, f in nxt.predecessors if p == tid)
                offset = heads[tid] + ceil_fraction(fraction, task.base_minutes)
    return heads


def _bottleneck_fill(state: _IterationState, pool: set[str]) -> None:
    """Fully sequence the most loaded capability class, then fill the rest."""
    graph = state.graph
    heads = _head_offsets(state)
    queue = sorted(
        (
            tid
            for tid in pool
            if graph.tasks[tid].step.capability_class == state.bottleneck_class
        ),
        key=lambda tid: (
            state.key_for(graph.tasks[tid].wo_id, 0),
            graph.tasks[tid].step_index,
            tid,
        ),
    )
    for tid in queue:
        state.tried += 1
        result = find_slot(
            SlotQuery(tid, FORWARD, not_before=heads[tid]),
            state.board,
            state.factory,
            graph,
        )
        if isinstance(result, ShortageReport):
            state.mark_unscheduled(tid, result)
        else:
            state.place(result)
    remaining = {
        tid
        for tid in pool
        if tid not in state.board.assignments and tid not in state.unscheduled
    }
    _forward_fill(state, remaining)


def run_iteration(
    vhe: VheDescriptor,
    demand: DemandState,
    factory: FactoryModel,
    graph: TaskGraph,
    initial_board: GanttBoard | None = None,
    seed: int = 0,
    iteration: int = 1,
) -> ScheduleRecord:
    """One full construction pass; every task ends up placed or explained.

    Never unplaces a tile. The initial board (possibly carrying locked
    residual tiles) must be valid.
    """
    if initial_board is None:
        initial_board = GanttBoard()
    problems = revalidate(initial_board, factory, graph)
    if problems:
        raise InvalidInitialBoardError(problems)

    started = time.perf_counter()
    board = initial_board.clone()
    state = _IterationState(vhe, demand, factory, graph, board, seed, iteration)

    pool = {tid for tid in graph.tasks if tid not in board.assignments}
    if vhe.strategy == STRATEGY_FORWARD:
        _forward_fill(state, pool)
    elif vhe.strategy == STRATEGY_BACKWARD:
        _backward_fill(state)
    elif vhe.strategy == STRATEGY_BOTTLENECK:
        _bottleneck_fill(state, pool)
    else:
        raise ValueError(f"unknown strategy {vhe.strategy!r}")

    # safety net: anything not placed and not explained gets one forward try
    for tid in graph.order:
        if tid in board.assignments or tid in state.unscheduled:
            continue
        state.tried += 1
        result = find_slot(SlotQuery(tid, FORWARD), board, factory, graph)
        if isinstance(result, ShortageReport):
            state.mark_unscheduled(tid, result)
        else:
            state.place(result)

    metrics = compute_metrics(board, demand, factory, graph)
    unscheduled = tuple(sorted(state.unscheduled.items()))
    return ScheduleRecord(
        vhe_id=vhe.id,
        iteration=iteration,
        board=board,
        unscheduled=unscheduled,
        metrics=metrics,
        demand_snapshot=dict(demand.urgency),
        seed=seed,
        placement_order=tuple(state.placement_order),
        build_seconds=time.perf_counter() - started,
        placements_tried=state.tried,
    )
