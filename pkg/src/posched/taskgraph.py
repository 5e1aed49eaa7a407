"""Expansion of a demand into the precedence-linked task graph."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

from .errors import CyclicDependencyError, UnknownProductError
from .model import PER_QUANTITY, DemandState, FactoryModel, RoutingStep


def task_id(wo_id: str, step_index: int) -> str:
    return f"{wo_id}:{step_index}"


@dataclass(frozen=True)
class Task:
    """One routing step of one work order; the unit placed on the board."""

    id: str
    wo_id: str
    step_index: int
    step: RoutingStep
    quantity: int
    predecessors: tuple[tuple[str, Fraction], ...]

    @cached_property
    def base_minutes(self) -> int:
        if self.step.duration_scaling == PER_QUANTITY:
            return self.step.base_duration * self.quantity
        return self.step.base_duration

    @property
    def display_name(self) -> str:
        return f"{self.wo_id} - {self.step.name}"


class TaskGraph:
    """Immutable DAG of tasks; chains per work order plus cross-order edges."""

    def __init__(self, tasks: dict[str, Task], wo_tasks: dict[str, tuple[str, ...]]):
        self.tasks = tasks
        self.wo_tasks = wo_tasks
        successors: dict[str, list[tuple[str, Fraction]]] = {tid: [] for tid in tasks}
        for task in tasks.values():
            for pred_id, fraction in task.predecessors:
                successors[pred_id].append((task.id, fraction))
        self.successors: dict[str, tuple[tuple[str, Fraction], ...]] = {
            tid: tuple(sorted(edges)) for tid, edges in successors.items()
        }
        self.order = self._topological_order()

    def __len__(self) -> int:
        return len(self.tasks)

    def _topological_order(self) -> tuple[str, ...]:
        import heapq

        indegree = {tid: len(t.predecessors) for tid, t in self.tasks.items()}
        ready = [tid for tid, deg in indegree.items() if deg == 0]
        heapq.heapify(ready)
        order: list[str] = []
        while ready:
            tid = heapq.heappop(ready)
            order.append(tid)
            for succ, _ in self.successors[tid]:
                indegree[succ] -= 1
                if indegree[succ] == 0:
                    heapq.heappush(ready, succ)
        if len(order) != len(self.tasks):
            raise CyclicDependencyError(self._find_cycle())
        return tuple(order)

    def _find_cycle(self) -> list[str]:
        state: dict[str, int] = {}
        stack: list[str] = []

        def visit(tid: str) -> list[str] | None:
            state[tid] = 1
            stack.append(tid)
            for succ, _ in self.successors[tid]:
                if state.get(succ) == 1:
                    return stack[stack.index(succ):] + [succ]
                if state.get(succ, 0) == 0:
                    found = visit(succ)
                    if found:
                        return found
            stack.pop()
            state[tid] = 2
            return None

        for tid in sorted(self.tasks):
            if state.get(tid, 0) == 0:
                found = visit(tid)
                if found:
                    return found
        return []


def expand_demand(demand: DemandState, factory: FactoryModel) -> TaskGraph:
    """One task chain per work order in routing order, plus the dependency
    edges between work orders (finish-to-start, last task to first task)."""
    tasks: dict[str, Task] = {}
    wo_tasks: dict[str, tuple[str, ...]] = {}
    for wo in demand.work_orders:
        product = factory.products_by_id.get(wo.product_id)
        if product is None:
            raise UnknownProductError(wo.id, wo.product_id)
        chain: list[str] = []
        for idx, step in enumerate(product.routing):
            tid = task_id(wo.id, idx)
            preds: tuple[tuple[str, Fraction], ...] = ()
            if idx > 0:
                preds = ((chain[-1], Fraction(step.overlap_fraction)),)
            tasks[tid] = Task(
                id=tid,
                wo_id=wo.id,
                step_index=idx,
                step=step,
                quantity=wo.quantity,
                predecessors=preds,
            )
            chain.append(tid)
        wo_tasks[wo.id] = tuple(chain)

    for pred_wo, succ_wo in factory.wo_dependencies:
        if pred_wo not in wo_tasks or succ_wo not in wo_tasks:
            continue  # validated elsewhere; dangling pairs are ignored here
        last = wo_tasks[pred_wo][-1]
        first_id = wo_tasks[succ_wo][0]
        first = tasks[first_id]
        tasks[first_id] = Task(
            id=first.id,
            wo_id=first.wo_id,
            step_index=first.step_index,
            step=first.step,
            quantity=first.quantity,
            predecessors=first.predecessors + ((last, Fraction(1)),),
        )

    return TaskGraph(tasks, wo_tasks)
