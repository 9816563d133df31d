"""Exchange registry and the global open/close event calendar.

The calendar sequences every exchange's daily open and close in UTC-hour
order and buckets events that share the exact same hour into simultaneous
groups. Events inside one group never feed each other: the engine evaluates
them against a common pre-group snapshot.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence


class ConfigError(ValueError):
    """Raised for invalid exchange registry or calendar configuration."""


class EventKind(enum.Enum):
    OPEN = "open"
    CLOSE = "close"


@dataclass(frozen=True, slots=True)
class ExchangeSpec:
    """One stock exchange: identity, relative capitalization and session hours.

    ``time_zone`` is the offset from UTC in hours and only enters the
    distance weighting between exchanges; ``open_hour``/``close_hour`` are
    already expressed in UTC.
    """

    id: int
    name: str
    capitalization: float
    time_zone: float
    open_hour: float
    close_hour: float

    def __post_init__(self) -> None:
        if self.capitalization <= 0:
            raise ConfigError(f"{self.name}: capitalization must be > 0")
        for label, hour in (("open_hour", self.open_hour), ("close_hour", self.close_hour)):
            if not 0.0 <= hour < 24.0:
                raise ConfigError(f"{self.name}: {label} must lie in [0, 24)")
        if self.open_hour == self.close_hour:
            raise ConfigError(f"{self.name}: open and close hours must be distinct")


@dataclass(frozen=True, slots=True)
class MarketEvent:
    """One open or close of one exchange; the simulation's time atom.

    ``slot`` is the event group's position within the day; events sharing
    the same UTC hour share the same slot.
    """

    exchange_id: int
    kind: EventKind
    day: int
    slot: int
    utc_hour: float

    @property
    def time_days(self) -> float:
        """Absolute event time in (trading-)day units."""
        return self.day + self.utc_hour / 24.0

    @property
    def order_key(self) -> tuple[int, int]:
        """Lexicographic position in the calendar; equal for simultaneous events."""
        return (self.day, self.slot)


@dataclass(frozen=True)
class EventCalendar:
    """Ordered daily event groups for a fixed exchange registry."""

    exchanges: tuple[ExchangeSpec, ...]
    days: tuple[tuple[tuple[MarketEvent, ...], ...], ...]

    @property
    def n_exchanges(self) -> int:
        return len(self.exchanges)

    @property
    def num_days(self) -> int:
        return len(self.days)

    @property
    def event_count(self) -> int:
        return sum(len(g) for day in self.days for g in day)

    def iter_groups(self) -> Iterator[tuple[MarketEvent, ...]]:
        for day in self.days:
            yield from day

    def iter_events(self) -> Iterator[MarketEvent]:
        for group in self.iter_groups():
            yield from group


def time_zone_gap(a: ExchangeSpec, b: ExchangeSpec, circular: bool = False) -> float:
    """Hour distance between two exchanges' time zones.

    Plain absolute difference by default; ``circular=True`` wraps around the
    24-hour clock instead.
    """
    gap = abs(a.time_zone - b.time_zone)
    if circular:
        gap = min(gap, 24.0 - gap)
    return gap


def build_calendar(exchanges: Sequence[ExchangeSpec], num_days: int) -> EventCalendar:
    """Lay out every exchange's open and close for ``num_days`` trading days.

    Within a day, events are bucketed by exact UTC-hour equality into
    simultaneous groups, groups sorted by hour, and events inside a group
    stored in ascending exchange id for reproducibility.
    """
    if not exchanges:
        raise ConfigError("exchange list is empty")
    if num_days < 1:
        raise ConfigError("num_days must be >= 1")
    ids = [e.id for e in exchanges]
    if sorted(ids) != list(range(len(exchanges))):
        raise ConfigError("exchange ids must be unique and contiguous from 0")

    by_hour: dict[float, list[tuple[int, EventKind]]] = {}
    for e in exchanges:
        by_hour.setdefault(e.open_hour, []).append((e.id, EventKind.OPEN))
        by_hour.setdefault(e.close_hour, []).append((e.id, EventKind.CLOSE))
    hours = sorted(by_hour)

    days = []
    for day in range(num_days):
        groups = []
        for slot, hour in enumerate(hours):
            group = tuple(
                MarketEvent(exchange_id=eid, kind=kind, day=day, slot=slot, utc_hour=hour)
                for eid, kind in sorted(by_hour[hour])
            )
            if len({ev.exchange_id for ev in group}) != len(group):
                raise ConfigError(f"exchange appears twice in group at hour {hour}")
            groups.append(group)
        days.append(tuple(groups))
    return EventCalendar(exchanges=tuple(exchanges), days=tuple(days))


# Registry file column order; values are plain decimal text.
REGISTRY_FIELDS = ("name", "capitalization", "time_zone", "open_hour", "close_hour")


def load_exchanges(path: str | Path) -> list[ExchangeSpec]:
    """Read the exchange registry CSV; ids are assigned in file order."""
    path = Path(path)
    exchanges: list[ExchangeSpec] = []
    seen: set[str] = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(REGISTRY_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing registry columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            name = row["name"].strip()
            if name in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate exchange name {name!r}")
            seen.add(name)
            try:
                exchanges.append(
                    ExchangeSpec(
                        id=len(exchanges),
                        name=name,
                        capitalization=float(row["capitalization"]),
                        time_zone=float(row["time_zone"]),
                        open_hour=float(row["open_hour"]),
                        close_hour=float(row["close_hour"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    if not exchanges:
        raise ConfigError(f"{path}: registry is empty")
    return exchanges


def write_exchanges(exchanges: Sequence[ExchangeSpec], path: str | Path) -> None:
    """Write a registry CSV readable by :func:`load_exchanges`."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REGISTRY_FIELDS)
        for e in exchanges:
            writer.writerow([e.name, e.capitalization, e.time_zone, e.open_hour, e.close_hour])
