import json
import time
from datetime import datetime
from pathlib import Path

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from posched import expand_demand, revalidate
from posched.api import create_app
from posched.api import _RunState, RUNNING
from posched.cli import main as cli_main
from posched.errors import ParseError
from posched.serialize import (
    board_from_assignment_docs,
    export_demand,
    factory_from_doc,
    factory_to_doc,
    metrics_from_doc,
    metrics_to_doc,
    parse_demand,
    record_from_doc,
    record_to_doc,
)
from posched.orchestrator import RunOptions
from posched.testkit import GenSpec, gen_instance
from posched.vhe import run_iteration, vhe_by_name

FIG2_CSV = """WO Name,WO Quantity,End Product,WO Due Date,Priority
WO-1001,200,KT-1-1001,10/09/2024,High
WO-1002,160,KT-1-1002,10/09/2024,High
WO-1003,1,KT-1-1003,11/09/2024,High
WO-1004,5,KT-1-1004,12/09/2024,Regular
WO-1005,10,KT-1-1005,27/09/2024,Regular
WO-1006,15,KT-1-1006,14/09/2024,Low
WO-1007,35,KT-1-1007,27/09/2024,Regular
WO-1008,53,KT-1-1008,27/09/2024,Regular
"""


def test_parse_demand_fig2_rows():
    demand = parse_demand(FIG2_CSV)
    assert len(demand.work_orders) == 8
    first = demand.work_orders[0]
    assert first.id == "WO-1001"
    assert first.quantity == 200
    assert first.product_id == "KT-1-1001"
    assert first.due_date == datetime(2024, 9, 11)  # end of 10/09 inclusive
    assert first.priority == "High"
    low = demand.by_id("WO-1006")
    assert low.priority == "Low" and low.quantity == 15
    assert all(value == 0 for value in demand.urgency.values())


def test_parse_demand_header_alias():
    text = FIG2_CSV.replace("WO Name", "O Name", 1)
    demand = parse_demand(text)
    assert demand.work_orders[0].id == "WO-1001"


@pytest.mark.parametrize(
    "mutation, phrase",
    [
        (lambda t: t.replace("WO Name", "Name"), "bad header"),
        (lambda t: t.replace("10/09/2024", "13/13/2024", 1), "bad date"),
        (lambda t: t.replace("High", "Urgent", 1), "bad priority"),
        (lambda t: t + "WO-1001,1,KT-1-1001,10/09/2024,High\n", "duplicate"),
        (lambda t: t.replace("200", "many", 1), "bad quantity"),
    ],
)
def test_parse_demand_rejections(mutation, phrase):
    with pytest.raises(ParseError) as err:
        parse_demand(mutation(FIG2_CSV))
    assert phrase in str(err.value).lower()


def test_demand_round_trip():
    demand = parse_demand(FIG2_CSV)
    assert parse_demand(export_demand(demand)) == demand


def test_factory_round_trip_with_all_features():
    factory, _ = gen_instance(
        GenSpec(seed=42, with_batching=True, with_crews=True, with_skills=True,
                with_overlap=True, with_pausable=True, with_wo_deps=True,
                n_capability_classes=3)
    )
    assert factory_from_doc(factory_to_doc(factory)) == factory


def test_factory_doc_rejects_unknown_fields_strict():
    factory, _ = gen_instance(GenSpec(seed=1, n_work_orders=2))
    doc = factory_to_doc(factory)
    doc["surprise"] = 1
    with pytest.raises(ParseError):
        factory_from_doc(doc)
    assert factory_from_doc(doc, lenient=True) == factory


def test_options_round_trip():
    options = RunOptions(seed=9, parallelism=4)
    assert RunOptions.from_doc(options.to_doc()) == options
    doc = options.to_doc()
    doc["bogus"] = True
    with pytest.raises(ParseError):
        RunOptions.from_doc(doc)


def test_record_round_trip():
    factory, demand = gen_instance(GenSpec(seed=31, n_work_orders=3, with_crews=True))
    graph = expand_demand(demand, factory)
    record = run_iteration(vhe_by_name("FWD-SPT"), demand, factory, graph)
    doc = record_to_doc(record, factory, graph)
    again = record_from_doc(doc, factory, graph)
    assert again.board == record.board
    assert again.metrics == record.metrics
    assert again.unscheduled == record.unscheduled
    assert again.demand_snapshot == record.demand_snapshot
    assert again.key == record.key


def test_metrics_round_trip():
    factory, demand = gen_instance(GenSpec(seed=32, n_work_orders=3))
    graph = expand_demand(demand, factory)
    record = run_iteration(vhe_by_name("FWD-EDD"), demand, factory, graph)
    assert metrics_from_doc(metrics_to_doc(record.metrics)) == record.metrics


# -- CLI golden behavior -------------------------------------------------


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    spec = {"seed": 7, "n_work_orders": 3, "routing_length": [1, 2]}
    (root / "spec.json").write_text(json.dumps(spec), encoding="utf-8")
    result = runner.invoke(
        cli_main, ["gen", "--spec", str(root / "spec.json"), "--out", str(root / "inst")]
    )
    assert result.exit_code == 0, result.output
    options = {
        "kind": "run-options",
        "tune": {"max_iterations": 2, "patience": 1},
        "weights": {"rank": ["due_date_compliance", "unscheduled_tasks"]},
    }
    (root / "options.json").write_text(json.dumps(options), encoding="utf-8")
    return root


def run_cli(*args):
    # click >= 8.2 separates stderr by default
    return CliRunner().invoke(cli_main, list(args))


def test_cli_schedule_writes_valid_run(toy_dir):
    out = toy_dir / "run1"
    result = run_cli(
        "schedule",
        "--factory", str(toy_dir / "inst" / "factory.json"),
        "--demand", str(toy_dir / "inst" / "demand.csv"),
        "--options", str(toy_dir / "options.json"),
        "--out", str(out),
    )
    assert result.exit_code == 0, result.output
    summary = json.loads(result.output)
    assert (out / "ibs.json").exists()
    assert (out / "manifest.json").exists()
    # the exported best schedule revalidates cleanly after reload
    factory = factory_from_doc(json.loads((out / "factory.json").read_text()))
    demand = parse_demand((out / "demand.csv").read_text())
    graph = expand_demand(demand, factory)
    ibs_doc = json.loads((out / "ibs.json").read_text())
    board = board_from_assignment_docs(ibs_doc["assignments"], factory, graph)
    assert revalidate(board, factory, graph) == []
    assert summary["schedules"] >= 6


def test_cli_missing_factory_exits_2(toy_dir):
    result = run_cli(
        "schedule",
        "--factory", str(toy_dir / "nope.json"),
        "--demand", str(toy_dir / "inst" / "demand.csv"),
        "--out", str(toy_dir / "runx"),
    )
    assert result.exit_code == 2
    error = json.loads(result.stderr)
    assert error["error"] == "FileNotFoundError"


def test_cli_same_seed_byte_identical(toy_dir):
    outs = []
    for sub in ("det-a", "det-b"):
        out = toy_dir / sub
        result = run_cli(
            "schedule",
            "--factory", str(toy_dir / "inst" / "factory.json"),
            "--demand", str(toy_dir / "inst" / "demand.csv"),
            "--options", str(toy_dir / "options.json"),
            "--out", str(out),
            "--seed", "11",
        )
        assert result.exit_code == 0, result.output
        outs.append((out / "ibs.json").read_bytes())
    assert outs[0] == outs[1]


def test_cli_whatif_already_scheduled_exits_3(toy_dir):
    result = run_cli("whatif", "--run", str(toy_dir / "run1"), "--include", "WO-1001")
    assert result.exit_code in (0, 3)
    if result.exit_code == 3:
        assert json.loads(result.stderr)["error"] in (
            "AlreadyScheduledError", "InfeasibleError"
        )


def test_cli_vhes_and_oracle(toy_dir):
    result = run_cli("vhes", "--json")
    assert result.exit_code == 0
    catalog = json.loads(result.output)
    assert len(catalog) >= 6

    oracle_spec = {"seed": 3, "n_work_orders": 2, "routing_length": [1, 1]}
    (toy_dir / "tiny.json").write_text(json.dumps(oracle_spec), encoding="utf-8")
    gen_result = run_cli("gen", "--spec", str(toy_dir / "tiny.json"),
                         "--out", str(toy_dir / "tiny"))
    assert gen_result.exit_code == 0
    result = run_cli(
        "oracle",
        "--factory", str(toy_dir / "tiny" / "factory.json"),
        "--demand", str(toy_dir / "tiny" / "demand.csv"),
    )
    assert result.exit_code == 0, result.output
    assert "z" in json.loads(result.output)


def test_cli_gen_rejects_unknown_field(toy_dir):
    (toy_dir / "bad.json").write_text(json.dumps({"seed": 1, "wat": 2}), encoding="utf-8")
    result = run_cli("gen", "--spec", str(toy_dir / "bad.json"), "--out", str(toy_dir / "bad"))
    assert result.exit_code == 2


# -- HTTP API -------------------------------------------------------------


@pytest.fixture()
def api_client(tmp_path):
    runs_dir = tmp_path / "runs"
    app = create_app(runs_dir)
    with TestClient(app) as client:
        yield client, tmp_path


def _write_inputs(root: Path):
    factory, demand = gen_instance(GenSpec(seed=51, n_work_orders=3, routing_length=(1, 2)))
    from posched.serialize import canonical_json, export_demand, factory_to_doc

    (root / "factory.json").write_text(canonical_json(factory_to_doc(factory)), encoding="utf-8")
    (root / "demand.csv").write_text(export_demand(demand), encoding="utf-8")
    return factory, demand


def _wait_done(client, handle, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        doc = client.get(f"/runs/{handle}").json()
        if doc["status"] in ("Done", "Failed"):
            return doc
        time.sleep(0.05)
    raise TimeoutError("run did not finish")


def test_http_full_flow(api_client):
    client, root = api_client
    _write_inputs(root)
    body = {
        "factory_path": str(root / "factory.json"),
        "demand_path": str(root / "demand.csv"),
        "options": {"tune": {"max_iterations": 2, "patience": 1}},
    }
    response = client.post("/runs", json=body)
    assert response.status_code == 202
    handle = response.json()["run_id"]

    status = _wait_done(client, handle)
    assert status["status"] == "Done", status
    assert status["format_version"] == 1
    assert status["result"]["ibs"]["vhe_id"] >= 1

    schedules = client.get(f"/runs/{handle}/schedules")
    assert schedules.status_code == 200
    records = schedules.json()["records"]
    assert records

    k, j = records[0]["vhe_id"], records[0]["iteration"]
    doc = client.get(f"/runs/{handle}/schedules/{k}/{j}")
    assert doc.status_code == 200
    assert doc.json()["kind"] == "schedule"

    # key-addressed endpoint resolves when a single run exists
    via_key = client.get(f"/schedules/{k}/{j}")
    assert via_key.status_code == 200

    ibs = client.get(f"/runs/{handle}/ibs")
    assert ibs.status_code == 200
    payload = ibs.json()
    assert payload["format_version"] == 1
    assert "assignments" in payload["ibs"]
    for flavor in payload["flavors"]:
        assert "distance" in flavor and "z" in flavor

    distance = client.get(f"/runs/{handle}/distance", params={"a": f"{k},{j}", "b": f"{k},{j}"})
    assert distance.status_code == 200
    assert distance.json()["distance"] == "0"

    scheduled_wo = json.loads(
        client.get(f"/runs/{handle}/ibs").text
    )["ibs"]["assignments"][0]["wo"]
    whatif = client.post(f"/runs/{handle}/whatif", json={"wo_id": scheduled_wo})
    assert whatif.status_code == 422

    assert client.get("/runs/doesnotexist").status_code == 404
    assert client.get("/vhes").json()["vhes"]


def test_http_409_while_running(api_client):
    client, root = api_client
    service = client.app.state.service
    state = _RunState(handle="busy", status=RUNNING, directory=root / "busy")
    service._runs["busy"] = state
    assert client.get("/runs/busy/schedules").status_code == 409
    assert client.get("/runs/busy/ibs").status_code == 409
    assert client.get("/runs/busy").status_code == 200  # status endpoint always answers


def test_http_submit_validation(api_client):
    client, root = api_client
    assert client.post("/runs", json={}).status_code == 422
    body = {"factory_path": str(root / "missing.json"), "demand_path": str(root / "missing.csv")}
    assert client.post("/runs", json=body).status_code == 422
