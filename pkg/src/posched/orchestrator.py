"""The full run: every agent iterates, critiques and retunes; all schedules
land in the dataset; the best is announced; what-if requests are served."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .board import FORWARD, GanttBoard, ShortageReport, SlotQuery, find_slot, revalidate
from .errors import (
    AlreadyScheduledError,
    ConfigError,
    InfeasibleError,
    InvalidResidualError,
    ParseError,
    UnknownEntityError,
)
from .metrics import GoalWeights, MetricsBundle, compute_metrics, z_score
from .model import DemandState, FactoryModel, require_valid
from .sds import Insight, ScheduleDataSet, best, flavors, insights
from .serialize import (
    content_hash,
    factory_to_doc,
    frac_str,
    parse_frac,
    residual_board_from_doc,
)
from .taskgraph import TaskGraph, expand_demand
from .tuner import TuneParams, adjust, critique, should_stop
from .vhe import ScheduleRecord, VheDescriptor, registry, run_iteration, vhe_by_name


@dataclass(frozen=True)
class RunOptions:
    """Everything one auto-schedule run needs besides the factory and demand."""

    weights: GoalWeights = field(
        default_factory=lambda: GoalWeights.ranked(
            ["due_date_compliance", "unscheduled_tasks", "makespan"]
        )
    )
    tune: TuneParams = field(default_factory=TuneParams)
    vhe_names: tuple[str, ...] = ()  # empty means every core agent
    parallelism: int = 1
    budget_seconds: float | None = None
    seed: int = 0
    epsilon: Fraction = Fraction(1, 100)
    delta: Fraction = Fraction(1, 5)
    displacement_limit: int = 3
    residual_path: str | None = None

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.budget_seconds is not None and self.budget_seconds <= 0:
            raise ConfigError("budget must be positive")
        if self.displacement_limit < 0:
            raise ConfigError("displacement limit must be >= 0")

    def selected_vhes(self) -> tuple[VheDescriptor, ...]:
        if not self.vhe_names:
            return registry()
        try:
            return tuple(vhe_by_name(name) for name in self.vhe_names)
        except KeyError as exc:
            raise ConfigError(f"unknown VHE {exc.args[0]!r}") from exc

    def to_doc(self) -> dict:
        return {
            "format_version": 1,
            "kind": "run-options",
            "weights": {
                "weights": {k: frac_str(v) for k, v in sorted(self.weights.weights.items())},
                "rank": list(self.weights.rank),
                "directions": dict(sorted(self.weights.directions.items())),
            },
            "tune": {
                "learning_rate": frac_str(self.tune.learning_rate),
                "early_margin": frac_str(self.tune.early_margin),
                "urgency_bound": frac_str(self.tune.urgency_bound),
                "max_iterations": self.tune.max_iterations,
                "patience": self.tune.patience,
                "budget_seconds": self.tune.budget_seconds,
            },
            "vhes": list(self.vhe_names),
            "parallelism": self.parallelism,
            "budget_seconds": self.budget_seconds,
            "seed": self.seed,
            "epsilon": frac_str(self.epsilon),
            "delta": frac_str(self.delta),
            "displacement_limit": self.displacement_limit,
            "residual_path": self.residual_path,
        }

    @staticmethod
    def from_doc(doc: dict, lenient: bool = False) -> "RunOptions":
        allowed = {
            "format_version", "kind", "weights", "tune", "vhes", "parallelism",
            "budget_seconds", "seed", "epsilon", "delta", "displacement_limit",
            "residual_path",
        }
        unknown = sorted(set(doc) - allowed)
        if unknown and not lenient:
            raise ParseError(f"unknown field(s) in options: {', '.join(unknown)}")
        weights_doc = doc.get("weights")
        if weights_doc is None:
            weights = GoalWeights.ranked(
                ["due_date_compliance", "unscheduled_tasks", "makespan"]
            )
        else:
            weights = GoalWeights(
                weights={k: parse_frac(v) for k, v in weights_doc.get("weights", {}).items()},
                rank=tuple(weights_doc.get("rank", [])),
                directions=dict(weights_doc.get("directions", {})),
            )
        tune_doc = doc.get("tune", {})
        tune = TuneParams(
            learning_rate=parse_frac(tune_doc.get("learning_rate", "1/10")),
            early_margin=parse_frac(tune_doc.get("early_margin", "1/20")),
            urgency_bound=parse_frac(tune_doc.get("urgency_bound", "1/2")),
            max_iterations=tune_doc.get("max_iterations", 12),
            patience=tune_doc.get("patience", 3),
            budget_seconds=tune_doc.get("budget_seconds"),
        )
        return RunOptions(
            weights=weights,
            tune=tune,
            vhe_names=tuple(doc.get("vhes", [])),
            parallelism=doc.get("parallelism", 1),
            budget_seconds=doc.get("budget_seconds"),
            seed=doc.get("seed", 0),
            epsilon=parse_frac(doc.get("epsilon", "1/100")),
            delta=parse_frac(doc.get("delta", "1/5")),
            displacement_limit=doc.get("displacement_limit", 3),
            residual_path=doc.get("residual_path"),
        )


@dataclass(frozen=True)
class ChainHistory:
    vhe_id: int
    iterations: tuple[tuple[int, Fraction], ...]  # (j, Z)
    stop_reason: str
    seconds: float


@dataclass(frozen=True)
class RunResult:
    run_id: str
    ibs_key: tuple[int, int]
    histories: tuple[ChainHistory, ...]
    insights: tuple[Insight, ...]
    flavor_keys: tuple[tuple[int, int], ...]
    wall_clock_seconds: float


@dataclass(frozen=True)
class AdjustedSchedule:
    """Outcome of a what-if force-include request."""

    board: GanttBoard
    metrics: MetricsBundle
    z: Fraction
    delta_z: Fraction
    displaced: tuple[str, ...]
    strategy: str  # insert | reschedule | displace
    unscheduled: tuple[tuple[str, ShortageReport], ...]


def run_result_to_doc(result: RunResult) -> dict:
    return {
        "format_version": 1,
        "kind": "run-result",
        "run_id": result.run_id,
        "ibs": {"vhe_id": result.ibs_key[0], "iteration": result.ibs_key[1]},
        "histories": [
            {
                "vhe_id": h.vhe_id,
                "iterations": [[j, frac_str(z)] for j, z in h.iterations],
                "stop_reason": h.stop_reason,
                "seconds": h.seconds,
            }
            for h in result.histories
        ],
        "insights": [
            {"task": i.task_id, "wo": i.wo_id, "message": i.message, "cause": i.cause.value}
            for i in result.insights
        ],
        "flavors": [[k, j] for k, j in result.flavor_keys],
        "wall_clock_seconds": result.wall_clock_seconds,
    }


def run_result_from_doc(doc: dict) -> RunResult:
    from .rules import Rule

    return RunResult(
        run_id=doc["run_id"],
        ibs_key=(doc["ibs"]["vhe_id"], doc["ibs"]["iteration"]),
        histories=tuple(
            ChainHistory(
                vhe_id=h["vhe_id"],
                iterations=tuple((j, parse_frac(z)) for j, z in h["iterations"]),
                stop_reason=h["stop_reason"],
                seconds=h["seconds"],
            )
            for h in doc["histories"]
        ),
        insights=tuple(
            Insight(
                task_id=i["task"], wo_id=i["wo"], message=i["message"], cause=Rule(i["cause"])
            )
            for i in doc["insights"]
        ),
        flavor_keys=tuple((k, j) for k, j in doc["flavors"]),
        wall_clock_seconds=doc["wall_clock_seconds"],
    )


def compute_run_id(factory: FactoryModel, demand: DemandState, options: RunOptions) -> str:
    doc = {
        "factory": factory_to_doc(factory),
        "demand": [
            [wo.id, wo.quantity, wo.product_id, wo.due_date.isoformat(), wo.priority]
            for wo in demand.work_orders
        ],
        "urgency": {k: frac_str(v) for k, v in sorted(demand.urgency.items())},
        "options": options.to_doc(),
    }
    return content_hash(doc)[:12]


def load_residual_board(path: str | Path, factory: FactoryModel, graph: TaskGraph) -> GanttBoard:
    """Parse a residual-tile file into a board with every assignment locked."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return GanttBoard()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"residual file is not valid JSON: {exc}") from exc
    try:
        return residual_board_from_doc(doc, factory, graph)
    except UnknownEntityError:
        raise
    except Exception as exc:  # invalid placements surface as a report
        from .errors import InvalidPlacementError

        if isinstance(exc, InvalidPlacementError):
            raise InvalidResidualError(exc.violations) from exc
        raise


def _chain_budget(options: RunOptions, n_chains: int) -> float | None:
    if options.budget_seconds is None:
        return options.tune.budget_seconds
    share = options.budget_seconds / max(1, n_chains)
    if options.tune.budget_seconds is None:
        return share
    return min(share, options.tune.budget_seconds)


def _run_chain(
    vhe: VheDescriptor,
    demand: DemandState,
    factory: FactoryModel,
    graph: TaskGraph,
    initial_board: GanttBoard,
    options: RunOptions,
    sds: ScheduleDataSet,
    budget: float | None,
) -> ChainHistory:
    tune = replace(options.tune, budget_seconds=budget)
    state = demand.with_zero_urgency()
    history: list[tuple[int, Fraction]] = []
    started = time.perf_counter()
    iteration = 1
    while True:
        record = run_iteration(
            vhe, state, factory, graph,
            initial_board=initial_board, seed=options.seed, iteration=iteration,
        )
        sds.append(record)
        history.append((iteration, z_score(record.metrics, options.weights)))
        decision = should_stop(history, tune, elapsed_seconds=time.perf_counter() - started)
        if decision.stop:
            return ChainHistory(
                vhe_id=vhe.id,
                iterations=tuple(history),
                stop_reason=decision.reason,
                seconds=time.perf_counter() - started,
            )
        findings = critique(record, state, tune, factory, graph)
        state = adjust(state, findings, tune, factory.horizon.minutes)
        iteration += 1


def auto_schedule(
    factory: FactoryModel,
    demand: DemandState,
    options: RunOptions | None = None,
    out_dir: str | Path | None = None,
) -> tuple[RunResult, ScheduleDataSet]:
    """Drive every selected agent through its iterate-critique-adjust chain,
    then announce the best schedule with its insights and flavors.

    Deterministic for a fixed seed regardless of the parallelism degree:
    chains are independent and all tie-breaks are key-based.
    """
    if options is None:
        options = RunOptions()
    options.weights.validate()
    require_valid(factory, demand)
    graph = expand_demand(demand, factory)
    vhes = options.selected_vhes()
    run_id = compute_run_id(factory, demand, options)
    sds = ScheduleDataSet(
        run_id, factory, graph, demand=demand, root=Path(out_dir) if out_dir else None
    )

    if options.residual_path is not None:
        initial_board = load_residual_board(options.residual_path, factory, graph)
    else:
        initial_board = GanttBoard()

    budget = _chain_budget(options, len(vhes))
    started = time.perf_counter()
    if options.parallelism == 1 or len(vhes) == 1:
        histories = [
            _run_chain(vhe, demand, factory, graph, initial_board, options, sds, budget)
            for vhe in vhes
        ]
    else:
        with ThreadPoolExecutor(max_workers=options.parallelism) as pool:
            futures = [
                pool.submit(
                    _run_chain, vhe, demand, factory, graph, initial_board, options, sds, budget
                )
                for vhe in vhes
            ]
            histories = [f.result() for f in futures]
    histories.sort(key=lambda h: h.vhe_id)

    ibs = best(sds, options.weights)
    flavor_records = flavors(sds, options.weights, options.epsilon, options.delta)
    result = RunResult(
        run_id=run_id,
        ibs_key=ibs.key,
        histories=tuple(histories),
        insights=tuple(insights(ibs, graph)),
        flavor_keys=tuple(r.key for r in flavor_records),
        wall_clock_seconds=time.perf_counter() - started,
    )
    return result, sds


# -- what-if force include -----------------------------------------------


def _wo_fully_placed(board: GanttBoard, graph: TaskGraph, wo_id: str) -> bool:
    return all(tid in board.assignments for tid in graph.wo_tasks[wo_id])


def _insert_into_free_capacity(record, graph, factory, wo_id):
    board = record.board.clone()
    placed = []
    for tid in graph.wo_tasks[wo_id]:
        if tid in board.assignments:
            continue
        result = find_slot(SlotQuery(tid, FORWARD), board, factory, graph)
        if isinstance(result, ShortageReport):
            return None, result
        board.place(result, factory, graph)
        placed.append(tid)
    return board, None


def _locked_base_board(record, graph, factory, unlock_wos: set[str]) -> GanttBoard:
    """IBS board minus the tiles of the work orders being re-placed, rest locked."""
    board = record.board.clone()
    removable = [
        aid
        for aid in sorted(board.assignments)
        if graph.tasks[aid].wo_id in unlock_wos and aid not in board.locked
    ]
    board.remove(removable)
    board.locked = set(board.assignments)
    return board


def _slack_wos(record, demand, factory, graph) -> set[str]:
    out = set()
    for wo in demand.work_orders:
        slack = record.metrics.wo_slack.get(wo.id)
        if slack is not None and slack > 0:
            chain = graph.wo_tasks[wo.id]
            if any(tid in record.board.locked for tid in chain):
                continue
            out.add(wo.id)
    return out


def what_if_force_include(
    run: RunResult,
    sds: ScheduleDataSet,
    wo_id: str,
    options: RunOptions | None = None,
) -> AdjustedSchedule:
    """Accommodate one left-out work order with minimal quality loss.

    Strategies, tried in order: (a) insert into free capacity; (b) re-run
    the winning agent with the target's urgency pinned high, letting only
    slack orders shift right; (c) additionally displace up to the
    configured number of cheapest work orders.
    """
    if options is None:
        options = RunOptions()
    factory, graph = sds.factory, sds.graph
    record = sds.get(*run.ibs_key)
    demand_wos = {t.wo_id for t in graph.tasks.values()}
    if wo_id not in demand_wos:
        raise UnknownEntityError("work order", wo_id)
    if _wo_fully_placed(record.board, graph, wo_id):
        raise AlreadyScheduledError(wo_id)

    if sds.demand is None:
        raise ConfigError("schedule dataset carries no demand; reload it with one")
    base_z = z_score(record.metrics, options.weights)
    demand = DemandState(
        work_orders=sds.demand.work_orders,
        urgency=dict(record.demand_snapshot),
    )

    # (a) free capacity
    board, failure = _insert_into_free_capacity(record, graph, factory, wo_id)
    if board is not None:
        metrics = compute_metrics(board, demand, factory, graph)
        z = z_score(metrics, options.weights)
        return AdjustedSchedule(
            board=board,
            metrics=metrics,
            z=z,
            delta_z=z - base_z,
            displaced=(),
            strategy="insert",
            unscheduled=tuple(
                (tid, rep) for tid, rep in record.unscheduled
                if tid not in board.assignments
            ),
        )

    vhe = next(v for v in registry(include_noisy=True) if v.id == record.vhe_id)
    pinned = demand.with_urgency({wo_id: options.tune.urgency_bound})
    fully_placed_before = {
        w for w in demand_wos if _wo_fully_placed(record.board, graph, w)
    }

    def rerun(unlock: set[str]):
        base = _locked_base_board(record, graph, factory, unlock | {wo_id})
        rerun_record = run_iteration(
            vhe, pinned, factory, graph,
            initial_board=base, seed=record.seed, iteration=record.iteration,
        )
        if not _wo_fully_placed(rerun_record.board, graph, wo_id):
            return None
        displaced = tuple(
            sorted(
                w for w in fully_placed_before
                if not _wo_fully_placed(rerun_record.board, graph, w)
            )
        )
        metrics = compute_metrics(rerun_record.board, demand, factory, graph)
        z = z_score(metrics, options.weights)
        return AdjustedSchedule(
            board=rerun_record.board,
            metrics=metrics,
            z=z,
            delta_z=z - base_z,
            displaced=displaced,
            strategy="reschedule" if not displaced else "displace",
            unscheduled=rerun_record.unscheduled,
        )

    # (b) let slack orders shift right
    slack = _slack_wos(record, demand, factory, graph)
    outcome = rerun(slack)
    if outcome is not None and not outcome.displaced:
        return outcome

    # (c) displace the cheapest work orders
    candidates = []
    for candidate in sorted(fully_placed_before - {wo_id}):
        chain = graph.wo_tasks[candidate]
        if any(tid in record.board.locked for tid in chain):
            continue
        trial = record.board.clone()
        trial.remove([tid for tid in chain if tid in trial.assignments])
        trial_metrics = compute_metrics(trial, demand, factory, graph)
        candidates.append((z_score(trial_metrics, options.weights), candidate))
    candidates.sort(key=lambda pair: (-pair[0], pair[1]))

    attempts = [outcome] if outcome is not None else []
    for depth in range(1, min(options.displacement_limit, len(candidates)) + 1):
        victims = {wo for _, wo in candidates[:depth]}
        attempt = rerun(slack | victims)
        if attempt is not None:
            attempts.append(attempt)
    if attempts:
        attempts.sort(key=lambda a: (-a.z, len(a.displaced)))
        return attempts[0]

    report = next(
        (rep for tid, rep in record.unscheduled if graph.tasks[tid].wo_id == wo_id),
        failure,
    )
    raise InfeasibleError(report)
