"""posched: a multi-expert constructive scheduling engine for manufacturing.

Heuristic agents each build complete valid Gantt schedules in single passes;
a reward/punishment tuner reshapes per-order urgencies between passes; every
schedule is retained with rich metrics and the best one is announced, with
interactive what-if repair on top.
"""

from .board import BACKWARD, FORWARD, GanttBoard, ShortageReport, SlotQuery, find_slot, revalidate
from .calendars import CalendarSpec, IntervalSet, Shift, TimeWindow, build_calendar, intersect
from .metrics import GoalWeights, MetricsBundle, compute_metrics, z_score
from .model import (
    BatchRule,
    CrewRule,
    DemandState,
    FactoryModel,
    Material,
    Product,
    RoutingStep,
    Station,
    ToolType,
    Worker,
    WorkOrder,
)
from .orchestrator import (
    AdjustedSchedule,
    RunOptions,
    RunResult,
    auto_schedule,
    load_residual_board,
    what_if_force_include,
)
from .rules import (
    CandidateAssignment,
    Rule,
    Violation,
    check_assignment,
    effective_duration,
    eligible_resources,
    material_balance,
)
from .sds import ScheduleDataSet, best, flavors, insights, load_sds
from .taskgraph import Task, TaskGraph, expand_demand
from .tuner import Inadequacy, TuneParams, adjust, critique, should_stop
from .vhe import ScheduleRecord, VheDescriptor, ordering_key, registry, run_iteration

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
