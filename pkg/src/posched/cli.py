"""The `pos` command line: schedule, what-if, generate, oracle, catalog, serve.

Exit codes: 0 success, 2 input validation failure, 3 domain failure
(infeasible what-if, oversized oracle search, ...), 1 unexpected error.
Failures emit a machine-readable JSON document on stderr.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from fractions import Fraction
from pathlib import Path

import click

from . import serialize
from .errors import (
    AlreadyScheduledError,
    ConfigError,
    EmptySdsError,
    InfeasibleError,
    ParseError,
    SchedulingError,
    SearchSpaceTooLargeError,
    UnknownEntityError,
)
from .metrics import compute_metrics, z_score
from .orchestrator import (
    AdjustedSchedule,
    RunOptions,
    run_result_from_doc,
    run_result_to_doc,
    auto_schedule,
    what_if_force_include,
)
from .sds import load_sds
from .taskgraph import expand_demand
from .testkit import GenSpec, gen_instance, oracle_best
from .vhe import registry

VALIDATION_EXIT = 2
DOMAIN_EXIT = 3

_VALIDATION_ERRORS = (ParseError, ConfigError, FileNotFoundError, json.JSONDecodeError)
_DOMAIN_ERRORS = (
    AlreadyScheduledError,
    InfeasibleError,
    EmptySdsError,
    UnknownEntityError,
    SearchSpaceTooLargeError,
)


def _fail(error: Exception, code: int) -> None:
    doc = {"error": type(error).__name__, "message": str(error)}
    if isinstance(error, InfeasibleError) and error.report is not None:
        doc["report"] = serialize.shortage_to_doc(error.report)
    if isinstance(error, ConfigError):
        doc["problems"] = error.problems
    click.echo(json.dumps(doc), err=True)
    sys.exit(code)


def _guard(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _VALIDATION_ERRORS as exc:
            _fail(exc, VALIDATION_EXIT)
        except _DOMAIN_ERRORS as exc:
            _fail(exc, DOMAIN_EXIT)
        except SchedulingError as exc:
            _fail(exc, DOMAIN_EXIT)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load_factory(path: str, lenient: bool):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return serialize.factory_from_doc(doc, lenient=lenient)


def _load_demand(path: str):
    return serialize.parse_demand(Path(path).read_text(encoding="utf-8"))


def _load_options(path: str | None, lenient: bool) -> RunOptions:
    if path is None:
        return RunOptions()
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunOptions.from_doc(doc, lenient=lenient)


def _write_json(path: Path, doc) -> None:
    path.write_text(serialize.canonical_json(doc), encoding="utf-8")


@click.group()
def main() -> None:
    """Automatic manufacturing scheduling from the command line."""


@main.command()
@click.option("--factory", "factory_path", required=True, type=click.Path())
@click.option("--demand", "demand_path", required=True, type=click.Path())
@click.option("--options", "options_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the options seed")
@click.option("--parallel", type=int, default=None, help="override the parallelism degree")
@click.option("--lenient", is_flag=True, help="warn on unknown file fields instead of failing")
@_guard
def schedule(factory_path, demand_path, options_path, out_dir, seed, parallel, lenient):
    """Run the full multi-agent loop and write the run artifacts."""
    factory = _load_factory(factory_path, lenient)
    demand = _load_demand(demand_path)
    options = _load_options(options_path, lenient)
    if seed is not None:
        options = dataclasses.replace(options, seed=seed)
    if parallel is not None:
        options = dataclasses.replace(options, parallelism=parallel)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result, sds = auto_schedule(factory, demand, options, out_dir=out)

    _write_json(out / "factory.json", serialize.factory_to_doc(factory))
    (out / "demand.csv").write_text(serialize.export_demand(demand), encoding="utf-8")
    _write_json(out / "options.json", options.to_doc())
    _write_json(out / "run.json", run_result_to_doc(result))
    ibs = sds.get(*result.ibs_key)
    ibs_doc = serialize.record_to_doc(
        ibs, factory, sds.graph, insights=list(result.insights), include_build_stats=False
    )
    _write_json(out / "ibs.json", ibs_doc)

    z = z_score(ibs.metrics, options.weights)
    click.echo(
        json.dumps(
            {
                "run_id": result.run_id,
                "ibs": {"vhe_id": result.ibs_key[0], "iteration": result.ibs_key[1]},
                "z": serialize.frac_str(z),
                "z_float": float(z),
                "schedules": len(sds),
                "unscheduled_tasks": len(ibs.unscheduled),
                "out": str(out),
            }
        )
    )


def load_run_dir(run_dir: Path):
    """Reload everything `pos schedule` wrote into one directory."""
    factory = serialize.factory_from_doc(
        json.loads((run_dir / "factory.json").read_text(encoding="utf-8"))
    )
    demand = serialize.parse_demand((run_dir / "demand.csv").read_text(encoding="utf-8"))
    options = RunOptions.from_doc(
        json.loads((run_dir / "options.json").read_text(encoding="utf-8"))
    )
    graph = expand_demand(demand, factory)
    sds = load_sds(run_dir, factory, graph, demand=demand)
    result = run_result_from_doc(
        json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    )
    return factory, demand, options, graph, sds, result


def adjusted_to_doc(adjusted: AdjustedSchedule, factory, graph, wo_id: str, run_id: str) -> dict:
    return {
        "format_version": 1,
        "kind": "adjusted-schedule",
        "run_id": run_id,
        "wo": wo_id,
        "strategy": adjusted.strategy,
        "z": serialize.frac_str(adjusted.z),
        "z_float": float(adjusted.z),
        "delta_z": serialize.frac_str(adjusted.delta_z),
        "delta_z_float": float(adjusted.delta_z),
        "displaced": list(adjusted.displaced),
        "assignments": [
            serialize.assignment_to_doc(adjusted.board.assignments[aid], factory, graph)
            for aid in sorted(adjusted.board.assignments)
        ],
        "unscheduled": [
            {"task": tid, "report": serialize.shortage_to_doc(report)}
            for tid, report in adjusted.unscheduled
        ],
        "metrics": serialize.metrics_to_doc(adjusted.metrics),
    }


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("--include", "wo_id", required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@_guard
def whatif(run_dir, wo_id, out_path):
    """Force one left-out work order into a finished run's best schedule."""
    run_path = Path(run_dir)
    factory, demand, options, graph, sds, result = load_run_dir(run_path)
    adjusted = what_if_force_include(result, sds, wo_id, options)
    doc = adjusted_to_doc(adjusted, factory, graph, wo_id, result.run_id)
    if out_path is not None:
        _write_json(Path(out_path), doc)
    click.echo(serialize.canonical_json(doc))


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_guard
def gen(spec_path, out_dir):
    """Generate a synthetic factory and demand from a spec file."""
    doc = json.loads(Path(spec_path).read_text(encoding="utf-8"))
    fields = {f.name for f in dataclasses.fields(GenSpec)}
    unknown = sorted(set(doc) - fields)
    if unknown:
        raise ParseError(f"unknown generator field(s): {', '.join(unknown)}")
    for key in ("routing_length", "duration_range", "quantity_range"):
        if key in doc:
            doc[key] = tuple(doc[key])
    spec = GenSpec(**doc)
    factory, demand = gen_instance(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "factory.json", serialize.factory_to_doc(factory))
    (out / "demand.csv").write_text(serialize.export_demand(demand), encoding="utf-8")
    graph = expand_demand(demand, factory)
    click.echo(
        json.dumps(
            {
                "out": str(out),
                "work_orders": len(demand.work_orders),
                "tasks": len(graph.tasks),
                "stations": len(factory.stations),
            }
        )
    )


@main.command()
@click.option("--factory", "factory_path", required=True, type=click.Path())
@click.option("--demand", "demand_path", required=True, type=click.Path())
@click.option("--grid", "grid_step", type=int, default=1)
@_guard
def oracle(factory_path, demand_path, grid_step):
    """Exhaustively compute the optimal Z of a tiny instance."""
    factory = _load_factory(factory_path, lenient=False)
    demand = _load_demand(demand_path)
    z, board = oracle_best(factory, demand, grid_step=grid_step)
    click.echo(
        json.dumps(
            {
                "z": serialize.frac_str(z),
                "z_float": float(z),
                "assignments": len(board.assignments),
            }
        )
    )


@main.command()
@click.option("--json", "as_json", is_flag=True, help="machine readable catalog")
def vhes(as_json):
    """List the scheduling agents."""
    agents = registry()
    if as_json:
        click.echo(
            json.dumps(
                [
                    {
                        "id": v.id,
                        "name": v.name,
                        "strategy": v.strategy,
                        "policy": v.policy,
                        "description": v.description,
                    }
                    for v in agents
                ]
            )
        )
        return
    width = max(len(v.name) for v in agents)
    for v in agents:
        click.echo(f"{v.id}  {v.name:<{width}}  {v.strategy:<10}  {v.policy:<14}  {v.description}")


@main.command()
@click.option("--port", type=int, default=8000)
@click.option("--host", default="127.0.0.1")
@click.option("--runs", "runs_dir", required=True, type=click.Path())
@click.option("--ui", "ui_dir", type=click.Path(), default=None)
def serve(port, host, runs_dir, ui_dir):
    """Serve the HTTP API (and optionally a built UI) for a runs directory."""
    import uvicorn

    from .api import create_app

    app = create_app(Path(runs_dir), ui_dir=Path(ui_dir) if ui_dir else None)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
