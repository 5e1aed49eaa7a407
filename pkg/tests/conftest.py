"""Shared builders for compact test factories."""

from __future__ import annotations

from datetime import datetime, timedelta
from fractions import Fraction

import pytest

from posched import (
    CalendarSpec,
    DemandState,
    FactoryModel,
    Material,
    Product,
    RoutingStep,
    Shift,
    Station,
    TimeWindow,
    ToolType,
    Worker,
    WorkOrder,
)

MONDAY = datetime(2024, 9, 2)  # horizon start used across tests

ALWAYS = CalendarSpec.always_on()
WEEKDAYS = frozenset(range(5))
DAY_SHIFT = CalendarSpec(shifts=(Shift(WEEKDAYS, 8 * 60, 16 * 60),))


def horizon(days: int = 7) -> TimeWindow:
    return TimeWindow(MONDAY, MONDAY + timedelta(days=days))


def at_minute(minute: int) -> datetime:
    return MONDAY + timedelta(minutes=minute)


def simple_factory(
    n_stations: int = 1,
    duration: int = 60,
    steps: int = 1,
    calendar: CalendarSpec = ALWAYS,
    days: int = 7,
    **station_kwargs,
) -> FactoryModel:
    """One capability class, one product, no workers/tools/materials."""
    routing = tuple(
        RoutingStep(name=f"mill-{i}", capability_class="mill", base_duration=duration)
        for i in range(steps)
    )
    return FactoryModel(
        horizon=horizon(days),
        stations=tuple(
            Station(f"mill-{i + 1:02d}", "mill", calendar, **station_kwargs)
            for i in range(n_stations)
        ),
        products=(Product("P1", routing),),
    )


def demand_of(*orders: WorkOrder) -> DemandState:
    return DemandState(tuple(orders))


def wo(wo_id: str, due_minute: int, quantity: int = 1, product: str = "P1",
       priority: str = "Regular") -> WorkOrder:
    return WorkOrder(wo_id, quantity, product, at_minute(due_minute), priority)


@pytest.fixture
def mill_factory() -> FactoryModel:
    return simple_factory(n_stations=1, duration=60)
