"""Reward/punishment tuning of work-order urgencies between iterations.

After each pass the critique classifies orders as deprived (late or left
out) or spoiled (finished needlessly early despite jumping the queue) and
the adjuster nudges their urgencies for the next pass. Stopping rules end
each agent's chain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

from .model import URGENCY_BOUND, DemandState, FactoryModel
from .taskgraph import TaskGraph
from .vhe import ScheduleRecord

log = logging.getLogger("posched.tuner")

DEPRIVED = "Deprived"
SPOILED = "Spoiled"

STOP_MAX_ITERATIONS = "MaxIterations"
STOP_NO_IMPROVEMENT = "NoImprovement"
STOP_BUDGET = "BudgetExhausted"


@dataclass(frozen=True)
class Inadequacy:
    wo_id: str
    kind: str  # Deprived | Spoiled
    severity: Fraction  # in (0, 1]
    placement_rank: int | None
    finish_minus_due: int | None
    unscheduled_count: int


@dataclass(frozen=True)
class TuneParams:
    learning_rate: Fraction = Fraction(1, 10)
    early_margin: Fraction = Fraction(1, 20)
    urgency_bound: Fraction = URGENCY_BOUND
    max_iterations: int = 12
    patience: int = 3
    budget_seconds: float | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.urgency_bound <= 0:
            raise ValueError("urgency bound must be positive")
        if self.max_iterations < 1 or self.patience < 1:
            raise ValueError("max_iterations and patience must be >= 1")


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str | None = None


CONTINUE = StopDecision(False, None)


def _completion_minutes(record: ScheduleRecord, demand: DemandState, graph_chains) -> dict:
    out = {}
    for wo in demand.work_orders:
        ends = []
        complete = True
        for tid in graph_chains[wo.id]:
            cand = record.board.assignments.get(tid)
            if cand is None:
                complete = False
                break
            ends.append(cand.end)
        out[wo.id] = max(ends) if complete and ends else None
    return out


def critique(
    record: ScheduleRecord,
    demand: DemandState,
    params: TuneParams,
    factory: FactoryModel,
    graph: TaskGraph,
) -> list[Inadequacy]:
    """Weaknesses of one schedule: deprived and spoiled work orders,
    sorted by severity descending."""
    horizon_minutes = factory.horizon.minutes
    due_minutes = {wo.id: factory.horizon.to_minute(wo.due_date) for wo in demand.work_orders}
    wo_chains = graph.wo_tasks

    unscheduled_by_wo: dict[str, int] = {}
    for task_id, _report in record.unscheduled:
        wo_id = graph.tasks[task_id].wo_id
        unscheduled_by_wo[wo_id] = unscheduled_by_wo.get(wo_id, 0) + 1

    completion = _completion_minutes(record, demand, wo_chains)

    placement_rank: dict[str, int] = {}
    for task_id in record.placement_order:
        wo_id = graph.tasks[task_id].wo_id
        if wo_id not in placement_rank:
            placement_rank[wo_id] = len(placement_rank) + 1

    due_order = sorted(demand.work_orders, key=lambda wo: (due_minutes[wo.id], wo.id))
    due_rank = {wo.id: i + 1 for i, wo in enumerate(due_order)}

    margin = params.early_margin * horizon_minutes
    horizon = max(1, horizon_minutes)

    findings: list[Inadequacy] = []
    for wo in demand.work_orders:
        due = due_minutes[wo.id]
        finished = completion[wo.id]
        missing = unscheduled_by_wo.get(wo.id, 0)
        if missing > 0 or finished is None:
            findings.append(
                Inadequacy(
                    wo_id=wo.id,
                    kind=DEPRIVED,
                    severity=Fraction(1),
                    placement_rank=placement_rank.get(wo.id),
                    finish_minus_due=None if finished is None else finished - due,
                    unscheduled_count=missing,
                )
            )
            continue
        lateness = finished - due
        if lateness > 0:
            findings.append(
                Inadequacy(
                    wo_id=wo.id,
                    kind=DEPRIVED,
                    severity=min(Fraction(1), Fraction(lateness, horizon)),
                    placement_rank=placement_rank.get(wo.id),
                    finish_minus_due=lateness,
                    unscheduled_count=0,
                )
            )
            continue
        earliness = -lateness
        rank = placement_rank.get(wo.id)
        if earliness > margin and rank is not None and rank < due_rank[wo.id]:
            findings.append(
                Inadequacy(
                    wo_id=wo.id,
                    kind=SPOILED,
                    severity=min(Fraction(1), Fraction(earliness, horizon)),
                    placement_rank=rank,
                    finish_minus_due=lateness,
                    unscheduled_count=0,
                )
            )
    findings.sort(key=lambda f: (-f.severity, f.wo_id))
    return findings


def adjust(
    demand: DemandState,
    inadequacies: list[Inadequacy],
    params: TuneParams,
    horizon_minutes: int,
) -> DemandState:
    """New demand state with urgencies nudged; untouched orders unchanged.

    Deprived orders are rewarded (scheduled earlier next pass). Spoiled
    orders are pushed later, but never by more than the tuner's own slack
    estimate predicts they can afford while still meeting their due date.
    """
    horizon = max(1, horizon_minutes)
    updates: dict[str, Fraction] = {}
    bound = params.urgency_bound
    for finding in inadequacies:
        old = demand.urgency[finding.wo_id]
        if finding.kind == DEPRIVED:
            new = old + params.learning_rate * finding.severity
        else:
            slack = max(0, -(finding.finish_minus_due or 0))
            safe_cap = Fraction(slack, horizon)
            new = old - params.learning_rate * min(finding.severity, safe_cap)
        new = max(-bound, min(bound, new))
        if new != old:
            updates[finding.wo_id] = new
            log.info(
                "%s urgency %s -> %s (%s, severity %s)",
                finding.wo_id, old, new, finding.kind, finding.severity,
            )
    if not updates:
        return demand
    return demand.with_urgency(updates)


def should_stop(
    history: list[tuple[int, Fraction]],
    params: TuneParams,
    elapsed_seconds: float = 0.0,
) -> StopDecision:
    """Evaluate the stopping rules after the latest iteration in `history`."""
    if not history:
        return CONTINUE
    latest_j = history[-1][0]
    if latest_j >= params.max_iterations:
        return StopDecision(True, STOP_MAX_ITERATIONS)
    best_j, best_z = history[0]
    for j, z in history[1:]:
        if z > best_z:
            best_j, best_z = j, z
    if latest_j - best_j >= params.patience:
        return StopDecision(True, STOP_NO_IMPROVEMENT)
    if params.budget_seconds is not None and elapsed_seconds >= params.budget_seconds:
        return StopDecision(True, STOP_BUDGET)
    return CONTINUE
