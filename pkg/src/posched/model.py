"""Digital factory model: resources, routings, work orders and demand state."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime
from fractions import Fraction
from functools import cached_property

from .calendars import CalendarSpec, TimeWindow
from .errors import ConfigError

PRIORITIES = ("High", "Regular", "Low")

URGENCY_BOUND = Fraction(1, 2)

FIXED = "fixed"
PER_QUANTITY = "per_quantity"


@dataclass(frozen=True)
class BatchRule:
    """Which tasks may share a simultaneous session on a batching station."""

    compatibility_key: str
    max_slots: int

    def __post_init__(self) -> None:
        if self.max_slots < 1:
            raise ValueError("max_slots must be >= 1")


@dataclass(frozen=True)
class CrewRule:
    """Allowed crew sizes and the speed factor each size yields."""

    min_workers: int
    max_workers: int
    productivity: dict[int, Fraction]

    def __post_init__(self) -> None:
        if self.min_workers < 1 or self.max_workers < self.min_workers:
            raise ValueError("crew bounds must satisfy 1 <= min <= max")
        prev = None
        for size in range(self.min_workers, self.max_workers + 1):
            if size not in self.productivity:
                raise ValueError(f"productivity missing for crew size {size}")
            factor = Fraction(self.productivity[size])
            if prev is not None and factor < prev:
                raise ValueError("speed factors must be non-decreasing in crew size")
            prev = factor
        if Fraction(self.productivity[self.min_workers]) != 1:
            raise ValueError("factor at min_workers must be exactly 1")

    def factor(self, crew_size: int) -> Fraction:
        return Fraction(self.productivity[crew_size])

    def sizes(self) -> range:
        return range(self.min_workers, self.max_workers + 1)


@dataclass(frozen=True)
class Station:
    id: str
    capability_class: str
    calendar: CalendarSpec
    capacity_attrs: dict[str, float] = field(default_factory=dict)
    batch: BatchRule | None = None
    crew: CrewRule | None = None

    def __post_init__(self) -> None:
        for name, value in self.capacity_attrs.items():
            if value <= 0:
                raise ValueError(f"capacity attr {name} must be positive")


@dataclass(frozen=True)
class ToolType:
    """A tool kind with `count` interchangeable individual units."""

    id: str
    count: int

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("tool count must be >= 0")

    def unit_ids(self) -> tuple[str, ...]:
        return tuple(f"{self.id}#{i}" for i in range(1, self.count + 1))


@dataclass(frozen=True)
class Worker:
    id: str
    skills: frozenset[str]
    calendar: CalendarSpec

    def __post_init__(self) -> None:
        if not self.skills:
            raise ValueError(f"worker {self.id} needs at least one skill")


@dataclass(frozen=True)
class Material:
    id: str
    on_hand: int

    def __post_init__(self) -> None:
        if self.on_hand < 0:
            raise ValueError("on-hand quantity must be >= 0")


@dataclass(frozen=True)
class RoutingStep:
    """One production step of a product routing."""

    name: str
    capability_class: str
    base_duration: int
    duration_scaling: str = FIXED
    required_tools: dict[str, int] = field(default_factory=dict)
    required_material: tuple[str, int] | None = None
    required_skill: str | None = None
    overlap_fraction: Fraction = Fraction(1)
    attrs: dict[str, object] = field(default_factory=dict)
    pausable: bool = False

    def __post_init__(self) -> None:
        if self.base_duration <= 0:
            raise ValueError("base_duration must be positive")
        if self.duration_scaling not in (FIXED, PER_QUANTITY):
            raise ValueError(f"unknown duration_scaling {self.duration_scaling!r}")
        if not (0 < self.overlap_fraction <= 1):
            raise ValueError("overlap_fraction must be in (0, 1]")
        for tool, units in self.required_tools.items():
            if units < 1:
                raise ValueError(f"required units of {tool} must be >= 1")
        if self.required_material is not None and self.required_material[1] < 1:
            raise ValueError("material quantity per unit must be >= 1")


@dataclass(frozen=True)
class Product:
    id: str
    routing: tuple[RoutingStep, ...]

    def __post_init__(self) -> None:
        if not self.routing:
            raise ValueError(f"product {self.id} has an empty routing")


@dataclass(frozen=True)
class WorkOrder:
    id: str
    quantity: int
    product_id: str
    due_date: datetime
    priority: str = "Regular"

    def __post_init__(self) -> None:
        if self.quantity < 1:
            raise ValueError("quantity must be >= 1")
        if self.priority not in PRIORITIES:
            raise ValueError(f"priority must be one of {PRIORITIES}")


@dataclass(frozen=True)
class DemandState:
    """The work orders to schedule plus their tunable urgency offsets."""

    work_orders: tuple[WorkOrder, ...]
    urgency: dict[str, Fraction] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [wo.id for wo in self.work_orders]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate work order ids")
        if not self.urgency:
            object.__setattr__(self, "urgency", {wo.id: Fraction(0) for wo in self.work_orders})
        if set(self.urgency) != set(ids):
            raise ValueError("urgency map must carry exactly one entry per work order")
        for wo_id, value in self.urgency.items():
            if not (-URGENCY_BOUND <= value <= URGENCY_BOUND):
                raise ValueError(f"urgency for {wo_id} outside [-1/2, 1/2]")

    def with_zero_urgency(self) -> "DemandState":
        return DemandState(self.work_orders, {wo.id: Fraction(0) for wo in self.work_orders})

    def with_urgency(self, updates: dict[str, Fraction]) -> "DemandState":
        merged = dict(self.urgency)
        merged.update(updates)
        return DemandState(self.work_orders, merged)

    def by_id(self, wo_id: str) -> WorkOrder:
        for wo in self.work_orders:
            if wo.id == wo_id:
                return wo
        raise KeyError(wo_id)


@dataclass(frozen=True)
class FactoryModel:
    """The complete digital twin a scheduling run operates on."""

    horizon: TimeWindow
    stations: tuple[Station, ...]
    tools: tuple[ToolType, ...] = ()
    workers: tuple[Worker, ...] = ()
    materials: tuple[Material, ...] = ()
    products: tuple[Product, ...] = ()
    wo_dependencies: tuple[tuple[str, str], ...] = ()

    @cached_property
    def stations_by_id(self) -> dict[str, Station]:
        return {s.id: s for s in self.stations}

    @cached_property
    def tools_by_id(self) -> dict[str, ToolType]:
        return {t.id: t for t in self.tools}

    @cached_property
    def workers_by_id(self) -> dict[str, Worker]:
        return {w.id: w for w in self.workers}

    @cached_property
    def materials_by_id(self) -> dict[str, Material]:
        return {m.id: m for m in self.materials}

    @cached_property
    def products_by_id(self) -> dict[str, Product]:
        return {p.id: p for p in self.products}

    @cached_property
    def tool_unit_types(self) -> dict[str, str]:
        """Individual tool unit id -> tool type id."""
        units: dict[str, str] = {}
        for tool in self.tools:
            for unit in tool.unit_ids():
                units[unit] = tool.id
        return units

    @cached_property
    def capability_classes(self) -> tuple[str, ...]:
        return tuple(sorted({s.capability_class for s in self.stations}))


def validate_factory(factory: FactoryModel) -> list[str]:
    """Collect structural problems; an empty list means the model is usable."""
    problems: list[str] = []
    for name, items in (
        ("station", factory.stations),
        ("tool", factory.tools),
        ("worker", factory.workers),
        ("material", factory.materials),
        ("product", factory.products),
    ):
        ids = [item.id for item in items]
        for dup in sorted({i for i in ids if ids.count(i) > 1}):
            problems.append(f"duplicate {name} id {dup}")

    classes = {s.capability_class for s in factory.stations}
    skills = set()
    for worker in factory.workers:
        skills |= worker.skills
    for product in factory.products:
        for idx, step in enumerate(product.routing):
            where = f"{product.id} step {idx} ({step.name})"
            if step.capability_class not in classes:
                problems.append(f"{where}: no station class {step.capability_class}")
            for tool in step.required_tools:
                if tool not in factory.tools_by_id:
                    problems.append(f"{where}: unknown tool type {tool}")
            if step.required_material is not None:
                mat = step.required_material[0]
                if mat not in factory.materials_by_id:
                    problems.append(f"{where}: unknown material {mat}")
            if step.required_skill is not None and step.required_skill not in skills:
                problems.append(f"{where}: no worker has skill {step.required_skill}")
    return problems


def validate_demand(demand: DemandState, factory: FactoryModel) -> list[str]:
    problems: list[str] = []
    for wo in demand.work_orders:
        if wo.product_id not in factory.products_by_id:
            problems.append(f"{wo.id}: unknown product {wo.product_id}")
        try:
            if factory.horizon.to_minute(wo.due_date) < 0:
                problems.append(f"{wo.id}: due date before horizon start")
        except ValueError:
            problems.append(f"{wo.id}: due date not minute-aligned with horizon")
    known = {wo.id for wo in demand.work_orders}
    for pred, succ in factory.wo_dependencies:
        for wo_id in (pred, succ):
            if wo_id not in known:
                problems.append(f"dependency references unknown work order {wo_id}")
    return problems


def require_valid(factory: FactoryModel, demand: DemandState) -> None:
    problems = validate_factory(factory) + validate_demand(demand, factory)
    if problems:
        raise ConfigError(problems)
