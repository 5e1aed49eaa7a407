"""Shift calendars and integer-minute interval arithmetic.

All engine times are integer minutes counted from the horizon start; a
calendar materializes to a canonical set of half-open [start, end) minute
intervals (sorted, disjoint, non-adjacent).
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta
from functools import cached_property

MINUTES_PER_DAY = 24 * 60

DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass(frozen=True)
class TimeWindow:
    """Half-open [start, end) wall-clock window the schedule lives in."""

    start: datetime
    end: datetime

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"window start {self.start} must precede end {self.end}")
        for edge in (self.start, self.end):
            if edge.second or edge.microsecond:
                raise ValueError("window edges must be whole minutes")

    @property
    def minutes(self) -> int:
        return int((self.end - self.start).total_seconds()) // 60

    def to_minute(self, instant: datetime) -> int:
        seconds = (instant - self.start).total_seconds()
        if seconds % 60:
            raise ValueError(f"{instant} is not whole-minute aligned with {self.start}")
        return int(seconds) // 60

    def to_datetime(self, minute: int) -> datetime:
        return self.start + timedelta(minutes=minute)


@dataclass(frozen=True)
class Shift:
    """A recurring working window on selected weekdays (0 = Monday)."""

    days: frozenset[int]
    start_minute: int
    end_minute: int

    def __post_init__(self) -> None:
        if not self.days or any(d < 0 or d > 6 for d in self.days):
            raise ValueError("shift days must be a non-empty subset of 0..6")
        if not (0 <= self.start_minute < self.end_minute <= MINUTES_PER_DAY):
            raise ValueError(
                f"shift window [{self.start_minute}, {self.end_minute}) out of range"
            )


@dataclass(frozen=True)
class CalendarSpec:
    """Weekly shift pattern plus explicit whole-day unavailability overrides."""

    shifts: tuple[Shift, ...]
    unavailable_dates: tuple[date, ...] = ()

    @staticmethod
    def always_on() -> "CalendarSpec":
        return CalendarSpec(shifts=(Shift(frozenset(range(7)), 0, MINUTES_PER_DAY),))


def _canonicalize(pairs) -> tuple[tuple[int, int], ...]:
    merged: list[list[int]] = []
    for s, e in sorted(pairs):
        if s >= e:
            continue
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return tuple((s, e) for s, e in merged)


@dataclass(frozen=True)
class IntervalSet:
    """Canonical set of half-open [start, end) integer-minute intervals."""

    intervals: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        prev_end = None
        for s, e in self.intervals:
            if s >= e:
                raise ValueError(f"empty interval [{s}, {e})")
            if prev_end is not None and s <= prev_end:
                raise ValueError("intervals must be sorted, disjoint and non-adjacent")
            prev_end = e

    @staticmethod
    def from_pairs(pairs) -> "IntervalSet":
        return IntervalSet(_canonicalize(pairs))

    @cached_property
    def _starts(self) -> list[int]:
        return [s for s, _ in self.intervals]

    def __bool__(self) -> bool:
        return bool(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def total(self) -> int:
        return sum(e - s for s, e in self.intervals)

    def _index_at(self, minute: int) -> int | None:
        """Index of the interval containing `minute`, if any."""
        i = bisect_right(self._starts, minute) - 1
        if i >= 0 and self.intervals[i][1] > minute:
            return i
        return None

    def contains_minute(self, minute: int) -> bool:
        return self._index_at(minute) is not None

    def contains_span(self, start: int, end: int) -> bool:
        """True when [start, end) lies inside a single interval."""
        if start >= end:
            return False
        i = self._index_at(start)
        return i is not None and self.intervals[i][1] >= end

    def intersect_span(self, start: int, end: int) -> list[tuple[int, int]]:
        """Clipped intervals overlapping [start, end)."""
        out = []
        i = bisect_right(self._starts, start) - 1
        if i < 0:
            i = 0
        for s, e in self.intervals[i:]:
            if s >= end:
                break
            lo, hi = max(s, start), min(e, end)
            if lo < hi:
                out.append((lo, hi))
        return out

    def covered(self, start: int, end: int) -> int:
        return sum(e - s for s, e in self.intersect_span(start, end))

    def covers_pairs(self, pairs) -> bool:
        """True when every [s, e) in `pairs` lies entirely inside this set."""
        for s, e in pairs:
            if self.covered(s, e) != e - s:
                return False
        return True

    def next_available(self, minute: int) -> int | None:
        """Smallest available minute >= `minute`."""
        i = self._index_at(minute)
        if i is not None:
            return minute
        j = bisect_right(self._starts, minute)
        if j < len(self.intervals):
            return self.intervals[j][0]
        return None

    def prev_available_end(self, minute: int) -> int | None:
        """Largest e <= `minute` such that minute e-1 is available."""
        if minute <= 0:
            return None
        i = self._index_at(minute - 1)
        if i is not None:
            return minute
        j = bisect_right(self._starts, minute - 1) - 1
        if j >= 0:
            return self.intervals[j][1]
        return None

    def span_forward(self, start: int, work: int) -> int | None:
        """End minute of a span starting at `start` that covers `work` available
        minutes, skipping gaps. `start` must itself be available."""
        if work <= 0 or not self.contains_minute(start):
            return None
        i = self._index_at(start)
        remaining = work
        pos = start
        for s, e in self.intervals[i:]:
            lo = max(s, pos)
            got = e - lo
            if got >= remaining:
                return lo + remaining
            remaining -= got
        return None

    def span_backward(self, end: int, work: int) -> int | None:
        """Start minute of a span ending at `end` that covers `work` available
        minutes going backwards. Minute end-1 must be available."""
        if work <= 0 or not self.contains_minute(end - 1):
            return None
        i = self._index_at(end - 1)
        remaining = work
        pos = end
        for s, e in reversed(self.intervals[: i + 1]):
            hi = min(e, pos)
            got = hi - s
            if got >= remaining:
                return hi - remaining
            remaining -= got
        return None

    def intersect(self, other: "IntervalSet") -> "IntervalSet":
        out = []
        a, b = self.intervals, other.intervals
        i = j = 0
        while i < len(a) and j < len(b):
            lo = max(a[i][0], b[j][0])
            hi = min(a[i][1], b[j][1])
            if lo < hi:
                out.append((lo, hi))
            if a[i][1] <= b[j][1]:
                i += 1
            else:
                j += 1
        return IntervalSet(tuple(out))


def intersect(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    """Intersection of two canonical interval sets."""
    return a.intersect(b)


def build_calendar(spec: CalendarSpec, horizon: TimeWindow) -> IntervalSet:
    """Materialize a calendar spec to the minutes it covers inside the horizon.

    An empty result is legitimate: the resource is simply never available.
    """
    pairs: list[tuple[int, int]] = []
    total = horizon.minutes
    blocked = set(spec.unavailable_dates)
    day = horizon.start.date()
    last = horizon.end.date()
    while day <= last:
        if day not in blocked:
            base = int((datetime.combine(day, time.min) - horizon.start).total_seconds()) // 60
            weekday = day.weekday()
            for shift in spec.shifts:
                if weekday in shift.days:
                    lo = max(0, base + shift.start_minute)
                    hi = min(total, base + shift.end_minute)
                    if lo < hi:
                        pairs.append((lo, hi))
        day += timedelta(days=1)
    return IntervalSet.from_pairs(pairs)
