"""HTTP surface for the review-and-adjust loop: runs, schedules, what-if.

Runs execute asynchronously (202 on submit, poll for Done); every response
carries format_version. One run executes at a time; what-if requests against
finished runs clone boards and never mutate stored records.
"""

from __future__ import annotations

import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import serialize
from .cli import adjusted_to_doc, load_run_dir
from .errors import (
    AlreadyScheduledError,
    ConfigError,
    InfeasibleError,
    ParseError,
    SchedulingError,
    UnknownEntityError,
)
from .metrics import z_score
from .orchestrator import (
    RunOptions,
    auto_schedule,
    run_result_to_doc,
    what_if_force_include,
)
from .sds import arrangement_distance
from .vhe import registry

FORMAT_VERSION = 1

QUEUED, RUNNING, DONE, FAILED = "Queued", "Running", "Done", "Failed"


@dataclass
class _RunState:
    handle: str
    status: str
    directory: Path
    error: str | None = None
    factory: object = None
    demand: object = None
    options: RunOptions | None = None
    graph: object = None
    sds: object = None
    result: object = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class RunService:
    """Owns run execution and the on-disk runs directory."""

    def __init__(self, runs_dir: Path):
        self.runs_dir = Path(runs_dir)
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self._runs: dict[str, _RunState] = {}
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=1)

    # -- lookup ------------------------------------------------------------

    def get(self, handle: str) -> _RunState:
        with self._lock:
            state = self._runs.get(handle)
        if state is None:
            state = self._load_from_disk(handle)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown run {handle}")
        return state

    def _load_from_disk(self, handle: str) -> _RunState | None:
        directory = self.runs_dir / handle
        if not (directory / "run.json").exists():
            return None
        state = _RunState(handle=handle, status=DONE, directory=directory)
        self._hydrate(state)
        with self._lock:
            self._runs.setdefault(handle, state)
        return self._runs[handle]

    def _hydrate(self, state: _RunState) -> None:
        factory, demand, options, graph, sds, result = load_run_dir(state.directory)
        state.factory, state.demand, state.options = factory, demand, options
        state.graph, state.sds, state.result = graph, sds, result

    def finished(self, state: _RunState) -> _RunState:
        if state.status != DONE:
            raise HTTPException(status_code=409, detail=f"run {state.handle} is {state.status}")
        return state

    def known_handles(self) -> list[str]:
        with self._lock:
            known = set(self._runs)
        for child in self.runs_dir.iterdir() if self.runs_dir.exists() else ():
            if (child / "run.json").exists():
                known.add(child.name)
        return sorted(known)

    # -- submission ----------------------------------------------------------

    def submit(self, factory_path: str, demand_path: str, options_doc: dict | None) -> str:
        factory = serialize.factory_from_doc(
            json.loads(Path(factory_path).read_text(encoding="utf-8"))
        )
        demand = serialize.parse_demand(Path(demand_path).read_text(encoding="utf-8"))
        options = RunOptions.from_doc(options_doc) if options_doc else RunOptions()
        handle = uuid.uuid4().hex[:12]
        directory = self.runs_dir / handle
        state = _RunState(handle=handle, status=QUEUED, directory=directory)
        with self._lock:
            self._runs[handle] = state
        self._executor.submit(self._execute, state, factory, demand, options)
        return handle

    def _execute(self, state: _RunState, factory, demand, options: RunOptions) -> None:
        state.status = RUNNING
        try:
            state.directory.mkdir(parents=True, exist_ok=True)
            result, sds = auto_schedule(factory, demand, options, out_dir=state.directory)
            from .orchestrator import run_result_to_doc as _to_doc

            (state.directory / "factory.json").write_text(
                serialize.canonical_json(serialize.factory_to_doc(factory)), encoding="utf-8"
            )
            (state.directory / "demand.csv").write_text(
                serialize.export_demand(demand), encoding="utf-8"
            )
            (state.directory / "options.json").write_text(
                serialize.canonical_json(options.to_doc()), encoding="utf-8"
            )
            (state.directory / "run.json").write_text(
                serialize.canonical_json(_to_doc(result)), encoding="utf-8"
            )
            ibs = sds.get(*result.ibs_key)
            ibs_doc = serialize.record_to_doc(
                ibs, factory, sds.graph, insights=list(result.insights),
                include_build_stats=False,
            )
            (state.directory / "ibs.json").write_text(
                serialize.canonical_json(ibs_doc), encoding="utf-8"
            )
            state.factory, state.demand, state.options = factory, demand, options
            state.graph, state.sds, state.result = sds.graph, sds, result
            state.status = DONE
        except Exception as exc:  # surfaced through the status endpoint
            state.error = f"{type(exc).__name__}: {exc}"
            state.status = FAILED


def _record_doc(state: _RunState, vhe_id: int, iteration: int) -> dict:
    try:
        record = state.sds.get(vhe_id, iteration)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"no schedule ({vhe_id}, {iteration})")
    return serialize.record_to_doc(record, state.factory, state.graph)


def create_app(runs_dir: Path, ui_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="posched", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    service = RunService(runs_dir)
    app.state.service = service

    @app.exception_handler(SchedulingError)
    async def scheduling_error(_request: Request, exc: SchedulingError):
        status = 422 if isinstance(exc, (AlreadyScheduledError, UnknownEntityError)) else 400
        return JSONResponse(
            status_code=status,
            content={
                "format_version": FORMAT_VERSION,
                "error": type(exc).__name__,
                "message": str(exc),
            },
        )

    @app.get("/vhes")
    def vhes():
        return {
            "format_version": FORMAT_VERSION,
            "vhes": [
                {
                    "id": v.id,
                    "name": v.name,
                    "strategy": v.strategy,
                    "policy": v.policy,
                    "description": v.description,
                }
                for v in registry()
            ],
        }

    @app.get("/runs")
    def list_runs():
        return {"format_version": FORMAT_VERSION, "runs": service.known_handles()}

    @app.post("/runs", status_code=202)
    def submit_run(body: dict):
        factory_path = body.get("factory_path")
        demand_path = body.get("demand_path")
        if not factory_path or not demand_path:
            raise HTTPException(status_code=422, detail="factory_path and demand_path required")
        try:
            handle = service.submit(factory_path, demand_path, body.get("options"))
        except (ParseError, ConfigError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {"format_version": FORMAT_VERSION, "run_id": handle, "status": QUEUED}

    @app.get("/runs/{handle}")
    def run_status(handle: str):
        state = service.get(handle)
        doc = {
            "format_version": FORMAT_VERSION,
            "run_id": handle,
            "status": state.status,
        }
        if state.status == DONE:
            doc["result"] = run_result_to_doc(state.result)
        if state.status == FAILED:
            doc["error"] = state.error
        return doc

    @app.get("/runs/{handle}/schedules")
    def run_schedules(handle: str):
        state = service.finished(service.get(handle))
        weights = state.options.weights
        return {
            "format_version": FORMAT_VERSION,
            "run_id": handle,
            "records": [
                {
                    "vhe_id": k,
                    "iteration": j,
                    "content_hash": state.sds.content_hashes().get((k, j)),
                    "z": serialize.frac_str(z_score(state.sds.get(k, j).metrics, weights)),
                    "z_float": float(z_score(state.sds.get(k, j).metrics, weights)),
                }
                for k, j in state.sds.keys()
            ],
        }

    @app.get("/runs/{handle}/schedules/{vhe_id}/{iteration}")
    def run_schedule(handle: str, vhe_id: int, iteration: int):
        state = service.finished(service.get(handle))
        return _record_doc(state, vhe_id, iteration)

    @app.get("/schedules/{vhe_id}/{iteration}")
    def schedule_by_key(vhe_id: int, iteration: int, run: str | None = None):
        if run is None:
            handles = service.known_handles()
            if len(handles) != 1:
                raise HTTPException(
                    status_code=404,
                    detail="run query parameter required when multiple runs exist",
                )
            run = handles[0]
        state = service.finished(service.get(run))
        return _record_doc(state, vhe_id, iteration)

    @app.get("/runs/{handle}/ibs")
    def run_ibs(handle: str):
        state = service.finished(service.get(handle))
        result = state.result
        ibs = state.sds.get(*result.ibs_key)
        weights = state.options.weights
        ibs_z = z_score(ibs.metrics, weights)
        total_tasks = len(state.graph.tasks)
        flavors = []
        for k, j in result.flavor_keys:
            record = state.sds.get(k, j)
            distance = arrangement_distance(ibs, record, total_tasks)
            z = z_score(record.metrics, weights)
            flavors.append(
                {
                    "vhe_id": k,
                    "iteration": j,
                    "z": serialize.frac_str(z),
                    "z_float": float(z),
                    "distance": serialize.frac_str(distance),
                    "distance_float": float(distance),
                }
            )
        doc = serialize.record_to_doc(
            ibs, state.factory, state.graph,
            insights=list(result.insights), include_build_stats=False,
        )
        return {
            "format_version": FORMAT_VERSION,
            "run_id": handle,
            "ibs": doc,
            "z": serialize.frac_str(ibs_z),
            "z_float": float(ibs_z),
            "flavors": flavors,
        }

    @app.get("/runs/{handle}/distance")
    def record_distance(handle: str, a: str, b: str):
        state = service.finished(service.get(handle))

        def parse_key(text: str) -> tuple[int, int]:
            try:
                k, j = text.split(",")
                return int(k), int(j)
            except ValueError:
                raise HTTPException(status_code=422, detail=f"bad record key {text!r}") from None

        try:
            rec_a = state.sds.get(*parse_key(a))
            rec_b = state.sds.get(*parse_key(b))
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=f"no schedule {exc.args[0]}") from exc
        distance = arrangement_distance(rec_a, rec_b, len(state.graph.tasks))
        return {
            "format_version": FORMAT_VERSION,
            "distance": serialize.frac_str(distance),
            "distance_float": float(distance),
        }

    @app.post("/runs/{handle}/whatif")
    def run_whatif(handle: str, body: dict):
        state = service.finished(service.get(handle))
        wo_id = body.get("wo_id")
        if not wo_id:
            raise HTTPException(status_code=422, detail="wo_id required")
        try:
            adjusted = what_if_force_include(state.result, state.sds, wo_id, state.options)
        except InfeasibleError as exc:
            return {
                "format_version": FORMAT_VERSION,
                "run_id": handle,
                "wo": wo_id,
                "feasible": False,
                "report": serialize.shortage_to_doc(exc.report) if exc.report else None,
            }
        doc = adjusted_to_doc(adjusted, state.factory, state.graph, wo_id, state.result.run_id)
        doc["feasible"] = True
        return doc

    if ui_dir is not None and ui_dir.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
