"""The board of tiles: placement, removal, slot search, full revalidation.

A board is single-writer; `clone()` is cheap and yields an independent value
so concurrent construction passes and what-if sessions never share state.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from dataclasses import dataclass, replace

from .errors import (
    InvalidPlacementError,
    LockedAssignmentError,
    UnknownAssignmentError,
)
from .model import FactoryModel, Station
from .rules import (
    CandidateAssignment,
    Rule,
    Violation,
    calendar_cache,
    ceil_fraction,
    check_assignment,
    effective_duration,
    eligible_resources,
    material_consumption,
)
from .taskgraph import TaskGraph

FORWARD = "forward"
BACKWARD = "backward"

ST, WK, TL = "st", "wk", "tl"


@dataclass(frozen=True)
class BatchSession:
    id: str
    station_id: str
    start: int
    end: int
    key_value: object


@dataclass(frozen=True)
class SlotQuery:
    """A request for the best valid placement of one task."""

    task_id: str
    direction: str = FORWARD
    not_before: int = 0
    not_after: int | None = None
    preferred_crew: int | None = None
    station_ids: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ShortageReport:
    """Why no valid window exists; the binding failure of the last window tried."""

    task_id: str
    rule_code: Rule
    kind: str  # stations | tools | workers | material | horizon
    subject: str
    detail: str = ""
    # True when the failed search provably covered every window the task
    # could ever occupy (placed successors cap it below not_after), so
    # retrying in the other direction cannot help
    terminal: bool = False


class GanttBoard:
    """All accepted assignments plus per-resource timeline indexes."""

    def __init__(self) -> None:
        self.assignments: dict[str, CandidateAssignment] = {}
        self.sessions: dict[str, BatchSession] = {}
        self.session_members: dict[str, list[str]] = {}
        self.locked: set[str] = set()
        self._busy: dict[tuple[str, str], list[tuple[int, int, str]]] = {}
        self._consumed: dict[str, int] = {}
        self._consumption_by_aid: dict[str, tuple[str, int]] = {}

    # -- state ------------------------------------------------------------

    def clone(self) -> "GanttBoard":
        other = GanttBoard()
        other.assignments = dict(self.assignments)
        other.sessions = dict(self.sessions)
        other.session_members = {k: list(v) for k, v in self.session_members.items()}
        other.locked = set(self.locked)
        other._busy = {k: list(v) for k, v in self._busy.items()}
        other._consumed = dict(self._consumed)
        other._consumption_by_aid = dict(self._consumption_by_aid)
        return other

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GanttBoard):
            return NotImplemented
        return (
            self.assignments == other.assignments
            and self.sessions == other.sessions
            and {k: sorted(v) for k, v in self.session_members.items()}
            == {k: sorted(v) for k, v in other.session_members.items()}
            and self.locked == other.locked
        )

    def __len__(self) -> int:
        return len(self.assignments)

    def lock(self, assignment_ids) -> None:
        for aid in assignment_ids:
            if aid not in self.assignments:
                raise UnknownAssignmentError(aid)
            self.locked.add(aid)

    def busy_entries(self, kind: str, resource_id: str) -> list[tuple[int, int, str]]:
        return self._busy.get((kind, resource_id), [])

    def overlapping(self, kind: str, resource_id: str, start: int, end: int):
        """Assignment ids busy on the resource during [start, end)."""
        entries = self._busy.get((kind, resource_id))
        if not entries:
            return []
        out = []
        i = bisect_left(entries, (end,)) - 1
        while i >= 0:
            s, e, aid = entries[i]
            if e > start:
                out.append(aid)
                i -= 1
            else:
                break
        out.reverse()
        return out

    def has_overlap(self, kind: str, resource_id: str, start: int, end: int) -> bool:
        entries = self._busy.get((kind, resource_id))
        if not entries:
            return False
        i = bisect_left(entries, (end,)) - 1
        return i >= 0 and entries[i][1] > start

    def material_consumed(self, factory: FactoryModel) -> dict[str, int]:
        return self._consumed

    def resources_of(self, cand: CandidateAssignment):
        yield ST, cand.station_id
        for worker_id in cand.worker_ids:
            yield WK, worker_id
        for unit_id in cand.tool_ids:
            yield TL, unit_id

    # -- mutation ---------------------------------------------------------

    def place(
        self, cand: CandidateAssignment, factory: FactoryModel, graph: TaskGraph
    ) -> CandidateAssignment:
        """Add a valid assignment; re-checks validity as defense in depth."""
        violations = check_assignment(cand, self, factory, graph)
        if violations:
            raise InvalidPlacementError(violations)
        station = factory.stations_by_id[cand.station_id]
        if station.batch is not None:
            sid = cand.batch_session or f"{cand.station_id}@{cand.start}"
            cand = replace(cand, batch_session=sid)
            if sid not in self.sessions:
                key = station.batch.compatibility_key
                self.sessions[sid] = BatchSession(
                    id=sid,
                    station_id=cand.station_id,
                    start=cand.start,
                    end=cand.end,
                    key_value=graph.tasks[cand.task_id].step.attrs.get(key),
                )
                self.session_members[sid] = []
            self.session_members[sid].append(cand.task_id)
        self.assignments[cand.task_id] = cand
        for kind, rid in self.resources_of(cand):
            insort(self._busy.setdefault((kind, rid), []), (cand.start, cand.end, cand.task_id))
        consumption = material_consumption(graph.tasks[cand.task_id])
        if consumption is not None:
            material_id, qty = consumption
            self._consumed[material_id] = self._consumed.get(material_id, 0) + qty
            self._consumption_by_aid[cand.task_id] = (material_id, qty)
        return cand

    def remove(self, assignment_ids) -> None:
        """Drop assignments; locked tiles refuse removal."""
        ids = list(assignment_ids)
        for aid in ids:
            if aid not in self.assignments:
                raise UnknownAssignmentError(aid)
            if aid in self.locked:
                raise LockedAssignmentError(aid)
        for aid in ids:
            cand = self.assignments.pop(aid)
            for kind, rid in self.resources_of(cand):
                entries = self._busy[(kind, rid)]
                entries.remove((cand.start, cand.end, aid))
                if not entries:
                    del self._busy[(kind, rid)]
            if cand.batch_session is not None:
                members = self.session_members.get(cand.batch_session)
                if members is not None:
                    members.remove(aid)
                    if not members:
                        del self.session_members[cand.batch_session]
                        del self.sessions[cand.batch_session]
            consumption = self._consumption_by_aid.pop(aid, None)
            if consumption is not None:
                material_id, qty = consumption
                self._consumed[material_id] -= qty
                if self._consumed[material_id] == 0:
                    del self._consumed[material_id]

    def rebuild_indexes(self) -> dict[tuple[str, str], list[tuple[int, int, str]]]:
        """Busy indexes recomputed from scratch (consistency oracle)."""
        busy: dict[tuple[str, str], list[tuple[int, int, str]]] = {}
        for aid in sorted(self.assignments):
            cand = self.assignments[aid]
            for kind, rid in self.resources_of(cand):
                busy.setdefault((kind, rid), []).append((cand.start, cand.end, aid))
        for entries in busy.values():
            entries.sort()
        return busy


def revalidate(board: GanttBoard, factory: FactoryModel, graph: TaskGraph) -> list[Violation]:
    """Re-run the assignment rules for every tile against the rest of the board."""
    violations: list[Violation] = []
    seen: set[tuple] = set()
    for aid in sorted(board.assignments):
        for violation in check_assignment(board.assignments[aid], board, factory, graph):
            key = (violation.rule_code, violation.offending_entity, violation.message)
            if key not in seen:
                seen.add(key)
                violations.append(violation)
    violations.sort(key=Violation.sort_key)
    return violations


def _crew_sizes(station: Station, task, preferred: int | None) -> list[int]:
    if station.crew is not None:
        sizes = list(station.crew.sizes())
    elif task.step.required_skill is not None:
        sizes = [1]
    else:
        sizes = [0]
    if preferred is not None:
        sizes = [s for s in sizes if s == preferred]
    return sizes


def _select_workers(
    board, cache, eligible, count, start, end, work_pairs, pausable
):
    """Lowest-id workers free over [start, end) whose calendars cover the work."""
    if count == 0:
        return ()
    chosen = []
    for worker_id in eligible:
        cal = cache.worker(worker_id)
        if pausable:
            if not cal.covers_pairs(work_pairs):
                continue
        elif not cal.contains_span(start, end):
            continue
        if board.has_overlap(WK, worker_id, start, end):
            continue
        chosen.append(worker_id)
        if len(chosen) == count:
            return tuple(chosen)
    return None


def _select_tools(board, elig_units, required, start, end):
    """Lowest-id free units per required tool type, or None on shortage."""
    picked: list[str] = []
    for tool_type in sorted(required):
        needed = required[tool_type]
        free = [
            unit
            for unit in elig_units.get(tool_type, ())
            if not board.has_overlap(TL, unit, start, end)
        ]
        if len(free) < needed:
            return None, tool_type
        picked.extend(free[:needed])
    return tuple(picked), None


class _Search:
    """Shared scaffolding for forward and backward slot search."""

    def __init__(self, query, board, factory, graph):
        self.query = query
        self.board = board
        self.factory = factory
        self.graph = graph
        self.task = graph.tasks.get(query.task_id)
        if self.task is None:
            from .errors import UnknownEntityError

            raise UnknownEntityError("task", query.task_id)
        self.cache = calendar_cache(factory)
        self.horizon = factory.horizon.minutes
        self.last_fail: ShortageReport | None = None

    def fail(self, rule: Rule, kind: str, subject: str, detail: str = "") -> None:
        # recorded as a plain tuple: failures happen per candidate window and
        # only the last one materializes into a report
        self.last_fail = (rule, kind, subject, detail)

    def fail_from_violation(self, violation: Violation) -> None:
        step = self.task.step
        rule = violation.rule_code
        if rule in (Rule.MACHINE_CAPABILITY, Rule.OUTSIDE_CALENDAR):
            kind, subject = "stations", step.capability_class
        elif rule == Rule.RESOURCE_BUSY:
            kind, subject = "stations", step.capability_class
        elif rule in (Rule.TOOL_SHORTAGE,):
            kind, subject = "tools", violation.offending_entity
        elif rule in (Rule.SKILL_MISMATCH, Rule.CREW_SIZE):
            kind, subject = "workers", step.required_skill or "any"
        elif rule == Rule.MATERIAL_SHORTAGE:
            kind, subject = "material", violation.offending_entity
        elif rule == Rule.HORIZON_EXCEEDED:
            kind, subject = "horizon", self.task.wo_id
        else:  # PrecedenceOverlap and batch rules bind through station windows
            kind, subject = "stations", step.capability_class
        self.last_fail = (rule, kind, subject, violation.message)

    def shortage(self) -> ShortageReport:
        if self.last_fail is not None:
            rule, kind, subject, detail = self.last_fail
            return ShortageReport(
                task_id=self.task.id,
                rule_code=rule,
                kind=kind,
                subject=subject,
                detail=detail,
            )
        return ShortageReport(
            task_id=self.task.id,
            rule_code=Rule.HORIZON_EXCEEDED,
            kind="horizon",
            subject=self.task.wo_id,
            detail="no window could be examined inside the horizon",
        )

    def prechecks(self, stations) -> ShortageReport | None:
        step = self.task.step
        if not stations:
            self.fail(Rule.MACHINE_CAPABILITY, "stations", step.capability_class)
            return self.shortage()
        consumption = material_consumption(self.task)
        if consumption is not None:
            material_id, qty = consumption
            on_hand = self.factory.materials_by_id[material_id].on_hand
            if self.board.material_consumed(self.factory).get(material_id, 0) + qty > on_hand:
                self.fail(Rule.MATERIAL_SHORTAGE, "material", material_id)
                return self.shortage()
        for tool_type, needed in sorted(step.required_tools.items()):
            units = self.elig.tool_units.get(tool_type, ())
            if len(units) < needed:
                self.fail(Rule.TOOL_SHORTAGE, "tools", tool_type)
                return self.shortage()
        if step.required_skill is not None and not self.elig.workers:
            self.fail(Rule.SKILL_MISMATCH, "workers", step.required_skill)
            return self.shortage()
        return None

    def precedence_lower(self) -> int:
        bound = self.query.not_before
        for pred_id, fraction in self.task.predecessors:
            pred = self.board.assignments.get(pred_id)
            if pred is not None:
                bound = max(bound, pred.start + ceil_fraction(fraction, pred.end - pred.start))
        return bound

    def placed_successor_edges(self) -> list[tuple[int, object]]:
        """(successor start, overlap fraction) for successors already placed."""
        edges = []
        for succ_id, fraction in self.graph.successors.get(self.task.id, ()):
            succ = self.board.assignments.get(succ_id)
            if succ is not None:
                edges.append((succ.start, fraction))
        return edges

    def successor_bound_ok(self, start: int, end: int) -> bool:
        for succ_start, fraction in self.succ_edges:
            if start > succ_start - ceil_fraction(fraction, end - start):
                return False
        return True

    def event_points(self, station, workers_needed: bool, lo: int, hi: int) -> list[int]:
        """Candidate time points within [lo, hi]: calendar boundaries and
        busy-interval edges, sliced by bisection so cost stays local."""
        points: set[int] = {lo}

        def add(value: int) -> None:
            if lo <= value <= hi:
                points.add(value)

        def add_intervals(intervals, starts) -> None:
            i = max(0, bisect_left(starts, lo) - 1)
            for s, e in intervals[i:]:
                if s > hi:
                    break
                add(s)
                add(e)

        def add_busy(entries) -> None:
            if not entries:
                return
            i = max(0, bisect_left(entries, (lo,)) - 1)
            for s, e, _ in entries[i:]:
                if s > hi:
                    break
                add(s)
                add(e)

        station_cal = self.cache.station(station)
        add_intervals(station_cal.intervals, station_cal._starts)
        add_busy(self.board.busy_entries(ST, station.id))
        if workers_needed:
            for worker_id in self.elig.workers:
                cal = self.cache.worker(worker_id)
                add_intervals(cal.intervals, cal._starts)
                add_busy(self.board.busy_entries(WK, worker_id))
        for units in self.elig.tool_units.values():
            for unit in units:
                add_busy(self.board.busy_entries(TL, unit))
        return sorted(points)

    def try_window(self, station, start, end, crew, session_id=None):
        """Build a concrete candidate over [start, end) and validate it fully."""
        step = self.task.step
        station_cal = self.cache.station(station)
        work_pairs = (
            station_cal.intersect_span(start, end) if step.pausable else [(start, end)]
        )
        workers = _select_workers(
            self.board, self.cache, self.elig.workers, crew, start, end, work_pairs, step.pausable
        )
        if workers is None:
            self.fail(
                Rule.SKILL_MISMATCH,
                "workers",
                step.required_skill or "any",
                f"fewer than {crew} workers free in [{start}, {end})",
            )
            return None
        tools, missing = _select_tools(
            self.board, self.elig.tool_units, step.required_tools, start, end
        )
        if tools is None:
            self.fail(
                Rule.TOOL_SHORTAGE,
                "tools",
                missing,
                f"no free unit of {missing} in [{start}, {end})",
            )
            return None
        cand = CandidateAssignment(
            task_id=self.task.id,
            station_id=station.id,
            start=start,
            end=end,
            tool_ids=tools,
            worker_ids=workers,
            batch_session=session_id,
        )
        violations = check_assignment(cand, self.board, self.factory, self.graph)
        if violations:
            self.fail_from_violation(violations[0])
            return None
        return cand


def find_slot(query: SlotQuery, board: GanttBoard, factory: FactoryModel, graph: TaskGraph):
    """Best valid assignment for the query, or a ShortageReport explaining
    why no window works.

    Forward: earliest start at or after the precedence bound and not_before,
    ties broken by (station id, worker ids, tool ids). Backward: latest end
    at or before not_after, symmetric tie-break. Open compatible batch
    sessions are preferred over opening new ones when they cost nothing.
    """
    search = _Search(query, board, factory, graph)
    search.elig = eligible_resources(search.task, factory)
    search.succ_edges = search.placed_successor_edges()
    stations = search.elig.stations
    if query.station_ids is not None:
        allowed = set(query.station_ids)
        stations = tuple(s for s in stations if s.id in allowed)
    early = search.prechecks(stations)
    if early is not None:
        return early
    if query.direction == FORWARD:
        return _find_forward(search, stations)
    if query.direction == BACKWARD:
        return _find_backward(search, stations)
    raise ValueError(f"unknown direction {query.direction!r}")


def _succ_end_cap(station_cal, duration: int, succ_edges, upper: int, pausable: bool):
    """Latest end <= upper whose implied start satisfies every placed
    successor's overlap bound, for one crew's duration. None if no end fits."""
    if not pausable:
        bound_start = min(ss - ceil_fraction(f, duration) for ss, f in succ_edges)
        cap = bound_start + duration
        return cap if cap > 0 else None

    def ok(end: int) -> bool:
        start = station_cal.span_backward(end, duration)
        if start is None:
            return False
        return all(
            start <= ss - ceil_fraction(f, end - start) for ss, f in succ_edges
        )

    hi = station_cal.prev_available_end(upper)
    if hi is None:
        return None
    if ok(hi):
        return hi
    # enumerate candidate ends implicitly: minute m is an end iff m-1 is
    # available; the bound tightens as ends grow, so feasibility is a prefix
    spans: list[tuple[int, int, int]] = []  # (first end, last end, rank base)
    total = 0
    for s, e in station_cal.intervals:
        if s >= hi:
            break
        top = min(e, hi)
        spans.append((s + 1, top, total))
        total += top - s

    def end_at(rank: int) -> int:
        for first, last, base in spans:
            if rank < base + (last - first + 1):
                return first + (rank - base)
        return spans[-1][1]

    lo_rank, hi_rank = -1, total - 1  # end_at(hi_rank) == hi, known infeasible
    while hi_rank - lo_rank > 1:
        mid = (lo_rank + hi_rank) // 2
        if ok(end_at(mid)):
            lo_rank = mid
        else:
            hi_rank = mid
    return end_at(lo_rank) if lo_rank >= 0 else None


def _candidate_key_forward(cand: CandidateAssignment):
    return (cand.start, cand.station_id, cand.worker_ids, cand.tool_ids)


def _candidate_key_backward(cand: CandidateAssignment):
    return (-cand.end, cand.station_id, cand.worker_ids, cand.tool_ids)


def _find_forward(search: _Search, stations):
    task = search.task
    step = task.step
    lower = search.precedence_lower()
    best: CandidateAssignment | None = None
    if lower >= search.horizon:
        search.fail(
            Rule.HORIZON_EXCEEDED,
            "horizon",
            task.wo_id,
            f"earliest possible start {lower} is at or beyond the horizon",
        )
        return search.shortage()

    for station in stations:
        station_cal = search.cache.station(station)
        if not station_cal:
            search.fail(
                Rule.OUTSIDE_CALENDAR,
                "stations",
                step.capability_class,
                f"station {station.id} has no working minutes in the horizon",
            )
            continue
        sizes = _crew_sizes(station, task, search.query.preferred_crew)
        if not sizes:
            continue
        durations = {k: effective_duration(task, station, k) for k in sizes}
        needs_workers = max(sizes) > 0
        succ_bounds: dict[int, int] | None = None
        if search.succ_edges and not step.pausable:
            succ_bounds = {
                crew: min(ss - ceil_fraction(f, durations[crew]) for ss, f in search.succ_edges)
                for crew in sizes
            }
        seen: set[int] = set()
        blocked_crews: set[int] = set()
        found = None
        exhausted = False
        window = max(1440, 4 * max(durations.values()))
        win_lo = lower
        while win_lo < search.horizon and found is None and not exhausted:
            win_hi = min(search.horizon, win_lo + window)
            points = search.event_points(station, needs_workers, win_lo, win_hi)
            for point in points:
                if best is not None and point > best.start:
                    exhausted = True
                    break
                start = station_cal.next_available(point)
                if start is None:
                    if not seen:  # no window was ever examined on this station
                        search.fail(
                            Rule.OUTSIDE_CALENDAR,
                            "stations",
                            step.capability_class,
                            f"no availability on {station.id} at or after {point}",
                        )
                    exhausted = True
                    break
                if start in seen:
                    continue
                seen.add(start)
                if best is not None and start > best.start:
                    exhausted = True
                    break
                overflow = 0
                chosen = None
                for crew in sizes:
                    if crew in blocked_crews:
                        continue
                    duration = durations[crew]
                    # cheapest screens first: the integer successor bound,
                    # then station busyness, then calendar shape
                    if succ_bounds is not None and start > succ_bounds[crew]:
                        search.fail(
                            Rule.PRECEDENCE_OVERLAP,
                            "stations",
                            step.capability_class,
                            "start is too late for a placed successor",
                        )
                        blocked_crews.add(crew)  # starts only grow from here
                        continue
                    if not step.pausable:
                        end = start + duration
                        if end > search.horizon:
                            search.fail(
                                Rule.HORIZON_EXCEEDED, "horizon", task.wo_id,
                                "work would run past the horizon",
                            )
                            continue
                        if search.board.has_overlap(ST, station.id, start, end):
                            search.fail(
                                Rule.RESOURCE_BUSY, "stations", step.capability_class,
                                "station busy over the candidate window",
                            )
                            continue
                        if not station_cal.contains_span(start, end):
                            search.fail(
                                Rule.OUTSIDE_CALENDAR, "stations", step.capability_class,
                                "calendar window too short for the work",
                            )
                            continue
                    else:
                        end = station_cal.span_forward(start, duration)
                        if end is None:
                            search.fail(
                                Rule.HORIZON_EXCEEDED, "horizon", task.wo_id,
                                "remaining calendar cannot hold the work",
                            )
                            overflow += 1
                            continue
                        if search.succ_edges and not search.successor_bound_ok(start, end):
                            search.fail(
                                Rule.PRECEDENCE_OVERLAP, "stations", step.capability_class,
                                "start is too late for a placed successor",
                            )
                            blocked_crews.add(crew)
                            continue
                        if search.board.has_overlap(ST, station.id, start, end):
                            search.fail(
                                Rule.RESOURCE_BUSY, "stations", step.capability_class,
                                "station busy over the candidate window",
                            )
                            continue
                    cand = search.try_window(station, start, end, crew)
                    if cand is not None and (chosen is None or (cand.end, crew) < chosen[:2]):
                        chosen = (cand.end, crew, cand)
                if len(blocked_crews) == len(sizes):
                    exhausted = True  # successor bounds can only tighten
                    break
                if step.pausable and overflow and overflow + len(blocked_crews) == len(sizes):
                    exhausted = True  # later starts only push the span further out
                    break
                if chosen is not None:
                    found = chosen[2]
                    break
            win_lo = win_hi
            window *= 2
        if found is not None and (best is None or _candidate_key_forward(found) < _candidate_key_forward(best)):
            best = found

    join = _best_session_join(search, stations, lower, FORWARD)
    if join is not None and (best is None or join.start <= best.start):
        return join
    if best is not None:
        return best
    return search.shortage()


def _find_backward(search: _Search, stations):
    task = search.task
    step = task.step
    lower = search.precedence_lower()
    not_after = search.query.not_after
    upper = search.horizon if not_after is None else min(not_after, search.horizon)
    best: CandidateAssignment | None = None
    capped_everywhere = bool(search.succ_edges) and bool(stations)
    if upper <= 0:
        search.fail(
            Rule.HORIZON_EXCEEDED,
            "horizon",
            task.wo_id,
            f"latest allowed end {upper} leaves no room in the horizon",
        )
        return search.shortage()

    for station in stations:
        station_cal = search.cache.station(station)
        if not station_cal:
            search.fail(
                Rule.OUTSIDE_CALENDAR,
                "stations",
                step.capability_class,
                f"station {station.id} has no working minutes in the horizon",
            )
            continue
        sizes = _crew_sizes(station, task, search.query.preferred_crew)
        if not sizes:
            continue
        durations = {k: effective_duration(task, station, k) for k in sizes}
        needs_workers = max(sizes) > 0
        station_upper = upper
        caps: list[int] = []
        succ_bounds: dict[int, int] | None = None
        if search.succ_edges:
            # the latest end a placed successor allows is a candidate of its
            # own: it need not coincide with any busy or calendar edge
            if not step.pausable:
                succ_bounds = {
                    crew: min(
                        ss - ceil_fraction(f, durations[crew]) for ss, f in search.succ_edges
                    )
                    for crew in sizes
                }
                caps = [
                    bound + durations[crew]
                    for crew, bound in succ_bounds.items()
                    if bound + durations[crew] > 0
                ]
            else:
                for crew in sizes:
                    cap = _succ_end_cap(
                        station_cal, durations[crew], search.succ_edges, upper, True
                    )
                    if cap is not None:
                        caps.append(cap)
            if not caps:
                search.fail(
                    Rule.PRECEDENCE_OVERLAP,
                    "stations",
                    step.capability_class,
                    f"placed successors leave no room before {upper} on {station.id}",
                )
                continue
            station_upper = min(upper, max(caps))
            if station_upper >= upper:
                capped_everywhere = False
        seen: set[int] = set()
        found = None
        exhausted = False
        window = max(1440, 4 * max(durations.values()))
        win_hi = station_upper
        while win_hi > 0 and found is None and not exhausted:
            win_lo = max(0, win_hi - window)
            points = search.event_points(station, needs_workers, win_lo, win_hi)
            extra = [c for c in caps if win_lo <= c <= win_hi]
            if extra:
                points = sorted(set(points) | set(extra))
            if points[-1] != win_hi:
                points.append(win_hi)
            for point in reversed(points):
                if point <= lower:
                    exhausted = True
                    break
                if best is not None and point < best.end:
                    exhausted = True
                    break
                end = station_cal.prev_available_end(point)
                if end is None:
                    if not seen:  # no window was ever examined on this station
                        search.fail(
                            Rule.OUTSIDE_CALENDAR,
                            "stations",
                            step.capability_class,
                            f"no availability on {station.id} at or before {point}",
                        )
                    exhausted = True
                    break
                if end in seen:
                    continue
                seen.add(end)
                if best is not None and end < best.end:
                    exhausted = True
                    break
                blocked = 0
                chosen = None
                for crew in sizes:
                    duration = durations[crew]
                    if not step.pausable:
                        start = end - duration
                        if start < lower:
                            search.fail(
                                Rule.PRECEDENCE_OVERLAP, "stations", step.capability_class,
                                "window would start before the precedence bound",
                            )
                            blocked += 1
                            continue
                        if succ_bounds is not None and start > succ_bounds[crew]:
                            search.fail(
                                Rule.PRECEDENCE_OVERLAP, "stations", step.capability_class,
                                "start is too late for a placed successor",
                            )
                            continue
                        if search.board.has_overlap(ST, station.id, start, end):
                            search.fail(
                                Rule.RESOURCE_BUSY, "stations", step.capability_class,
                                "station busy over the candidate window",
                            )
                            continue
                        if not station_cal.contains_span(start, end):
                            search.fail(
                                Rule.OUTSIDE_CALENDAR, "stations", step.capability_class,
                                "calendar window too short for the work",
                            )
                            continue
                    else:
                        start = station_cal.span_backward(end, duration)
                        if start is None:
                            search.fail(
                                Rule.OUTSIDE_CALENDAR, "stations", step.capability_class,
                                "calendar window too short for the work",
                            )
                            continue
                        if start < lower:
                            search.fail(
                                Rule.PRECEDENCE_OVERLAP, "stations", step.capability_class,
                                "window would start before the precedence bound",
                            )
                            blocked += 1
                            continue
                        if search.succ_edges and not search.successor_bound_ok(start, end):
                            search.fail(
                                Rule.PRECEDENCE_OVERLAP, "stations", step.capability_class,
                                "start is too late for a placed successor",
                            )
                            continue
                        if search.board.has_overlap(ST, station.id, start, end):
                            search.fail(
                                Rule.RESOURCE_BUSY, "stations", step.capability_class,
                                "station busy over the candidate window",
                            )
                            continue
                    cand = search.try_window(station, start, end, crew)
                    if cand is not None and (chosen is None or (-cand.start, crew) < chosen[:2]):
                        chosen = (-cand.start, crew, cand)
                if blocked == len(sizes):
                    exhausted = True  # earlier ends start even earlier; still blocked
                    break
                if chosen is not None:
                    found = chosen[2]
                    break
            win_hi = win_lo
            window *= 2
        if found is not None and (
            best is None or _candidate_key_backward(found) < _candidate_key_backward(best)
        ):
            best = found

    join = _best_session_join(search, stations, lower, BACKWARD)
    if join is not None:
        if best is None or join.end >= best.end:
            return join
    if best is not None:
        return best
    report = search.shortage()
    if capped_everywhere:
        report = replace(report, terminal=True)
    return report


def _best_session_join(search: _Search, stations, lower: int, direction: str):
    """Earliest (forward) or latest (backward) joinable open batch session."""
    task = search.task
    step = task.step
    station_ids = {s.id: s for s in stations}
    upper = search.query.not_after
    best = None
    for sid in sorted(search.board.sessions):
        session = search.board.sessions[sid]
        station = station_ids.get(session.station_id)
        if station is None or station.batch is None:
            continue
        if session.start < lower:
            continue
        if direction == BACKWARD and upper is not None and session.end > upper:
            continue
        members = search.board.session_members.get(sid, ())
        if len(members) >= station.batch.max_slots:
            continue
        key = station.batch.compatibility_key
        if session.key_value != step.attrs.get(key):
            continue
        for crew in _crew_sizes(station, task, search.query.preferred_crew):
            cand = search.try_window(station, session.start, session.end, crew, session_id=sid)
            if cand is not None:
                ordering = (
                    (cand.start, cand.station_id, sid)
                    if direction == FORWARD
                    else (-cand.end, cand.station_id, sid)
                )
                if best is None or ordering < best[0]:
                    best = (ordering, cand)
                break
    return best[1] if best is not None else None
