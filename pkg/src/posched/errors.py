"""Exception types shared across the engine."""

from __future__ import annotations


class SchedulingError(Exception):
    """Base class for all engine errors."""


class ConfigError(SchedulingError):
    """A model, demand, or options document failed validation."""

    def __init__(self, problems):
        self.problems = list(problems) if not isinstance(problems, str) else [problems]
        super().__init__("; ".join(self.problems))


class UnknownEntityError(SchedulingError):
    """A reference points at an entity that does not exist."""

    def __init__(self, kind: str, entity_id: str):
        self.kind = kind
        self.entity_id = entity_id
        super().__init__(f"unknown {kind}: {entity_id}")


class UnknownProductError(UnknownEntityError):
    def __init__(self, wo_id: str, product_id: str):
        super().__init__("product", product_id)
        self.wo_id = wo_id


class CyclicDependencyError(SchedulingError):
    def __init__(self, path):
        self.path = list(path)
        super().__init__("dependency cycle: " + " -> ".join(self.path))


class CrewSizeError(SchedulingError):
    def __init__(self, station_id: str, crew_size: int, lo: int, hi: int):
        self.station_id = station_id
        self.crew_size = crew_size
        super().__init__(f"crew of {crew_size} outside [{lo}, {hi}] on {station_id}")


class InvalidPlacementError(SchedulingError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(f"placement rejected: {[v.rule_code.value for v in self.violations]}")


class LockedAssignmentError(SchedulingError):
    def __init__(self, assignment_id: str):
        self.assignment_id = assignment_id
        super().__init__(f"assignment {assignment_id} is locked")


class UnknownAssignmentError(SchedulingError):
    def __init__(self, assignment_id: str):
        self.assignment_id = assignment_id
        super().__init__(f"assignment {assignment_id} not on board")


class InvalidInitialBoardError(SchedulingError):
    def __init__(self, report):
        self.report = list(report)
        super().__init__(f"initial board invalid ({len(self.report)} violations)")


class InvalidResidualError(SchedulingError):
    def __init__(self, report):
        self.report = list(report)
        super().__init__(f"residual board invalid ({len(self.report)} violations)")


class DuplicateKeyError(SchedulingError):
    def __init__(self, vhe_id: int, iteration: int):
        self.key = (vhe_id, iteration)
        super().__init__(f"schedule ({vhe_id}, {iteration}) already stored")


class InvalidRecordError(SchedulingError):
    def __init__(self, report):
        self.report = list(report)
        super().__init__(f"record board invalid ({len(self.report)} violations)")


class EmptySdsError(SchedulingError):
    def __init__(self):
        super().__init__("schedule dataset is empty")


class NoPositiveWeightError(SchedulingError):
    def __init__(self):
        super().__init__("goal weights must include at least one positive weight")


class UnknownMetricError(SchedulingError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown metric name: {name}")


class AlreadyScheduledError(SchedulingError):
    def __init__(self, wo_id: str):
        self.wo_id = wo_id
        super().__init__(f"work order {wo_id} is already fully scheduled")


class InfeasibleError(SchedulingError):
    def __init__(self, report):
        self.report = report
        super().__init__("no strategy could accommodate the request")


class SearchSpaceTooLargeError(SchedulingError):
    def __init__(self, estimate: float, cap: float):
        self.estimate = estimate
        self.cap = cap
        super().__init__(f"estimated search space {estimate:.2e} exceeds cap {cap:.2e}")


class ParseError(SchedulingError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(message + where)


class BudgetExhaustedError(SchedulingError):
    def __init__(self):
        super().__init__("budget exhausted before the first schedule completed")
