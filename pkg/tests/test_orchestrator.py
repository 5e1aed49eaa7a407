import dataclasses
import json
from fractions import Fraction
from pathlib import Path

import pytest

from posched import (
    CandidateAssignment,
    GanttBoard,
    GoalWeights,
    RunOptions,
    ScheduleDataSet,
    auto_schedule,
    compute_metrics,
    expand_demand,
    load_residual_board,
    revalidate,
    what_if_force_include,
    z_score,
)
from posched.board import ShortageReport
from posched.errors import (
    AlreadyScheduledError,
    ConfigError,
    InfeasibleError,
    UnknownEntityError,
)
from posched.orchestrator import RunResult, compute_run_id
from posched.rules import Rule
from posched.sds import best
from posched.serialize import record_to_doc
from posched.testkit import GenSpec, gen_instance
from posched.tuner import TuneParams, STOP_BUDGET
from posched.vhe import ScheduleRecord, registry, run_iteration, vhe_by_name

from conftest import ALWAYS, at_minute, demand_of, simple_factory, wo

FAST = TuneParams(max_iterations=2, patience=1)
COMPLIANCE = GoalWeights.ranked(["due_date_compliance", "unscheduled_tasks"])


def toy_options(**kwargs) -> RunOptions:
    base = dict(weights=COMPLIANCE, tune=FAST)
    base.update(kwargs)
    return RunOptions(**base)


def test_auto_schedule_contract():
    factory, demand = gen_instance(GenSpec(seed=13, n_work_orders=3, stations_per_class=2))
    options = toy_options()
    result, sds = auto_schedule(factory, demand, options)
    assert len(sds) <= len(registry()) * 12
    ibs = sds.get(*result.ibs_key)
    z_ibs = z_score(ibs.metrics, options.weights)
    for key in sds.keys():
        assert z_score(sds.get(*key).metrics, options.weights) <= z_ibs
    assert result.ibs_key in sds.keys()
    assert {h.vhe_id for h in result.histories} == {v.id for v in registry()}
    for history in result.histories:
        js = [j for j, _ in history.iterations]
        assert js == sorted(js)
        assert set((history.vhe_id, j) for j in js) <= set(sds.keys())


def test_single_vhe_chain():
    factory, demand = gen_instance(GenSpec(seed=14, n_work_orders=2))
    result, sds = auto_schedule(factory, demand, toy_options(vhe_names=("FWD-EDD",)))
    assert len(result.histories) == 1
    assert all(k == 1 for k, _ in sds.keys())


def test_determinism_across_parallelism(tmp_path):
    factory, demand = gen_instance(GenSpec(seed=15, n_work_orders=4, with_crews=True))
    graph = expand_demand(demand, factory)
    docs = []
    hashes = []
    for degree, sub in ((1, "a"), (8, "b")):
        options = toy_options(parallelism=degree, seed=7)
        result, sds = auto_schedule(factory, demand, options, out_dir=tmp_path / sub)
        ibs = sds.get(*result.ibs_key)
        docs.append(
            json.dumps(record_to_doc(ibs, factory, graph, include_build_stats=False),
                       sort_keys=True)
        )
        hashes.append(sds.content_hashes())
    assert docs[0] == docs[1]
    assert hashes[0] == hashes[1]


def test_run_id_depends_on_inputs():
    factory, demand = gen_instance(GenSpec(seed=16, n_work_orders=2))
    a = compute_run_id(factory, demand, toy_options(seed=1))
    b = compute_run_id(factory, demand, toy_options(seed=1))
    c = compute_run_id(factory, demand, toy_options(seed=2))
    assert a == b != c


def test_budget_stops_after_first_iteration():
    factory, demand = gen_instance(GenSpec(seed=17, n_work_orders=3))
    options = RunOptions(weights=COMPLIANCE, tune=TuneParams(max_iterations=12, patience=6),
                         budget_seconds=1e-9, vhe_names=("FWD-EDD", "FWD-SPT"))
    result, sds = auto_schedule(factory, demand, options)
    for history in result.histories:
        assert history.stop_reason == STOP_BUDGET
        assert len(history.iterations) == 1  # one full pass always completes


def test_config_validation():
    factory, demand = gen_instance(GenSpec(seed=18, n_work_orders=2))
    with pytest.raises(ConfigError):
        RunOptions(parallelism=0)
    with pytest.raises(ConfigError):
        auto_schedule(factory, demand, toy_options(vhe_names=("NOPE",)))


# -- residual boards ---------------------------------------------------------


def test_residual_empty_file(tmp_path):
    factory, demand = gen_instance(GenSpec(seed=19, n_work_orders=2))
    graph = expand_demand(demand, factory)
    path = tmp_path / "residual.json"
    path.write_text("", encoding="utf-8")
    board = load_residual_board(path, factory, graph)
    assert len(board) == 0


def test_residual_tiles_locked(tmp_path):
    factory = simple_factory(n_stations=2)
    demand = demand_of(wo("WO-1", 3000), wo("WO-2", 3000))
    graph = expand_demand(demand, factory)
    doc = {
        "kind": "residual",
        "assignments": [
            {
                "task": "WO-1:0", "station": "mill-01",
                "start": at_minute(0).isoformat(), "end": at_minute(60).isoformat(),
            },
            {
                "task": "WO-2:0", "station": "mill-02",
                "start": at_minute(30).isoformat(), "end": at_minute(90).isoformat(),
            },
        ],
    }
    path = tmp_path / "residual.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    board = load_residual_board(path, factory, graph)
    assert len(board) == 2
    assert board.locked == {"WO-1:0", "WO-2:0"}


def test_residual_unknown_station(tmp_path):
    factory = simple_factory()
    demand = demand_of(wo("WO-1", 3000))
    graph = expand_demand(demand, factory)
    doc = {
        "kind": "residual",
        "assignments": [
            {"task": "WO-1:0", "station": "ghost",
             "start": at_minute(0).isoformat(), "end": at_minute(60).isoformat()},
        ],
    }
    path = tmp_path / "residual.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(UnknownEntityError):
        load_residual_board(path, factory, graph)


# -- what-if -------------------------------------------------------------


def record_without(record, graph, factory, demand, wo_id, cause=Rule.RESOURCE_BUSY):
    """A copy of `record` with one work order deliberately left off the board,
    exactly the shape a construction pass that dropped it would produce."""
    board = record.board.clone()
    chain = graph.wo_tasks[wo_id]
    board.remove([tid for tid in chain if tid in board.assignments])
    shortage = tuple(
        (tid, ShortageReport(tid, cause, "stations",
                             graph.tasks[tid].step.capability_class))
        for tid in chain
    )
    return dataclasses.replace(
        record,
        board=board,
        unscheduled=tuple(sorted(record.unscheduled + shortage)),
        metrics=compute_metrics(board, demand, factory, graph),
    )


def sds_with_gap(seed=23, n=3, wo_index=0):
    factory, demand = gen_instance(
        GenSpec(seed=seed, n_work_orders=n, stations_per_class=2, due_tightness=4.0)
    )
    graph = expand_demand(demand, factory)
    record = run_iteration(vhe_by_name("FWD-EDD"), demand, factory, graph)
    target = demand.work_orders[wo_index].id
    assert all(tid in record.board.assignments for tid in graph.wo_tasks[target])
    gapped = record_without(record, graph, factory, demand, target)
    sds = ScheduleDataSet("run-wi", factory, graph, demand=demand)
    sds.append(gapped)
    result = RunResult(
        run_id="run-wi", ibs_key=gapped.key, histories=(), insights=(),
        flavor_keys=(), wall_clock_seconds=0.0,
    )
    return factory, demand, graph, sds, result, target


def test_whatif_inserts_into_free_capacity():
    factory, demand, graph, sds, result, target = sds_with_gap()
    options = toy_options()
    adjusted = what_if_force_include(result, sds, target, options)
    assert adjusted.strategy == "insert"
    assert adjusted.delta_z >= 0
    assert adjusted.displaced == ()
    assert revalidate(adjusted.board, factory, graph) == []
    for tid in graph.wo_tasks[target]:
        assert tid in adjusted.board.assignments


def test_whatif_already_scheduled():
    factory, demand, graph, sds, result, target = sds_with_gap()
    scheduled = next(w.id for w in demand.work_orders if w.id != target)
    with pytest.raises(AlreadyScheduledError):
        what_if_force_include(result, sds, scheduled, toy_options())


def test_whatif_unknown_wo():
    factory, demand, graph, sds, result, target = sds_with_gap()
    with pytest.raises(UnknownEntityError):
        what_if_force_include(result, sds, "WO-NOPE", toy_options())


def test_whatif_displacement_or_infeasible_on_saturated_board():
    factory = simple_factory(n_stations=1, duration=2000, days=4)
    demand = demand_of(
        wo("WO-1", 2000), wo("WO-2", 4000), wo("WO-3", 5760), wo("WO-4", 5760)
    )
    graph = expand_demand(demand, factory)
    record = run_iteration(vhe_by_name("FWD-EDD"), demand, factory, graph)
    # 4 × 2000 > 5760: someone is left out
    left_out = [tid for tid, _ in record.unscheduled]
    assert left_out
    target = graph.tasks[left_out[0]].wo_id
    sds = ScheduleDataSet("run-sat", factory, graph, demand=demand)
    sds.append(record)
    result = RunResult(
        run_id="run-sat", ibs_key=record.key, histories=(), insights=(),
        flavor_keys=(), wall_clock_seconds=0.0,
    )
    options = toy_options()
    try:
        adjusted = what_if_force_include(result, sds, target, options)
    except InfeasibleError:
        return  # acceptable outcome: never an invalid board
    assert adjusted.displaced  # cannot fit without displacement
    assert revalidate(adjusted.board, factory, graph) == []
    for tid in graph.wo_tasks[target]:
        assert tid in adjusted.board.assignments


def test_whatif_never_mutates_stored_records():
    factory, demand, graph, sds, result, target = sds_with_gap(seed=29)
    before = sds.get(*result.ibs_key).board.clone()
    what_if_force_include(result, sds, target, toy_options())
    assert sds.get(*result.ibs_key).board == before
