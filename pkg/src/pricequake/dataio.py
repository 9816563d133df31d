"""Price-file ingestion, event-return extraction and parameter files.

Input prices are per-exchange delimited text with a ``date,open,close``
header and ISO dates. Returns are attached to calendar events: a close
event carries the intraday log return, an open event the overnight log
return against the most recent available close (which may skip holiday
gaps). Missing sessions produce absent events; the replay engine skips
them and stress persists across the gap.
"""

from __future__ import annotations

import csv
import datetime
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from pricequake.engine import InputError, ModelParams
from pricequake.network import EventCalendar, EventKind

logger = logging.getLogger(__name__)

PRICE_FIELDS = ("date", "open", "close")


class IngestError(ValueError):
    """Malformed price data; carries one line-numbered diagnostic per row."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(diagnostics))


class PriceRow(NamedTuple):
    date: datetime.date
    open: float
    close: float


@dataclass(frozen=True)
class PriceDataset:
    """Validated per-exchange (date, open, close) series."""

    series: dict[str, tuple[PriceRow, ...]]

    @property
    def all_dates(self) -> list[datetime.date]:
        dates: set[datetime.date] = set()
        for rows in self.series.values():
            dates.update(r.date for r in rows)
        return sorted(dates)

    @property
    def session_count(self) -> int:
        return sum(len(rows) for rows in self.series.values())


def ingest(files: Mapping[str, str | Path]) -> PriceDataset:
    """Parse and validate per-exchange price files.

    All malformed rows across all files are collected into one IngestError;
    an empty file only drops that exchange with a warning.
    """
    series: dict[str, tuple[PriceRow, ...]] = {}
    diagnostics: list[str] = []
    for name in sorted(files):
        path = Path(files[name])
        rows: list[PriceRow] = []
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                logger.warning("%s: empty file, exchange %s excluded", path, name)
                continue
            missing = set(PRICE_FIELDS) - set(reader.fieldnames)
            if missing:
                diagnostics.append(f"{path}:1: missing columns {sorted(missing)}")
                continue
            for lineno, row in enumerate(reader, start=2):
                problems = []
                date = None
                try:
                    date = datetime.date.fromisoformat(row["date"].strip())
                except ValueError:
                    problems.append(f"unparseable date {row['date']!r}")
                values = {}
                for col in ("open", "close"):
                    try:
                        values[col] = float(row[col])
                        if values[col] <= 0:
                            problems.append(f"non-positive {col} {row[col]!r}")
                    except (TypeError, ValueError):
                        problems.append(f"unparseable {col} {row[col]!r}")
                if date is not None and rows and not problems and date <= rows[-1].date:
                    problems.append(f"date {date} not strictly increasing")
                if problems:
                    diagnostics.append(f"{path}:{lineno}: " + "; ".join(problems))
                else:
                    rows.append(PriceRow(date, values["open"], values["close"]))
        if rows:
            series[name] = tuple(rows)
        elif reader.fieldnames is not None:
            logger.warning("%s: no valid rows, exchange %s excluded", path, name)
    if diagnostics:
        raise IngestError(diagnostics)
    return PriceDataset(series=series)


def ingest_dir(directory: str | Path, exclude: set[str] = frozenset()) -> PriceDataset:
    """Ingest every ``*.csv`` in a directory; file stems name the exchanges."""
    directory = Path(directory)
    files = {
        p.stem: p
        for p in sorted(directory.glob("*.csv"))
        if p.stem not in exclude
    }
    if not files:
        raise InputError(f"no price files found in {directory}")
    return ingest(files)


def write_dataset(dataset: PriceDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, rows in dataset.series.items():
        with (directory / f"{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PRICE_FIELDS)
            for r in rows:
                w.writerow([r.date.isoformat(), repr(r.open), repr(r.close)])


@dataclass(frozen=True)
class EventReturns:
    """Per-event returns aligned with a calendar, with absence markers."""

    calendar: EventCalendar
    returns: np.ndarray
    present: np.ndarray
    dates: list[datetime.date]


def to_event_returns(dataset: PriceDataset, calendar: EventCalendar) -> EventReturns:
    """Attach log returns to calendar events, marking missing sessions absent.

    Calendar day d corresponds to the d-th date in the dataset's sorted
    date union; the calendar must have exactly that many days.
    """
    dates = dataset.all_dates
    if calendar.num_days != len(dates):
        raise InputError(
            f"calendar has {calendar.num_days} days but dataset spans {len(dates)} dates"
        )
    names = {e.name for e in calendar.exchanges}
    unknown = set(dataset.series) - names
    if unknown:
        raise InputError(f"dataset exchanges not in calendar: {sorted(unknown)}")

    by_id: dict[int, dict[datetime.date, PriceRow]] = {}
    prev_close: dict[int, dict[datetime.date, float]] = {}
    for spec in calendar.exchanges:
        rows = dataset.series.get(spec.name, ())
        by_id[spec.id] = {r.date: r for r in rows}
        closes: dict[datetime.date, float] = {}
        last = None
        pos = 0
        for d in dates:
            while pos < len(rows) and rows[pos].date < d:
                last = rows[pos].close
                pos += 1
            if last is not None:
                closes[d] = last
        prev_close[spec.id] = closes

    n_events = calendar.event_count
    returns = np.zeros(n_events)
    present = np.zeros(n_events, dtype=bool)
    for idx, ev in enumerate(calendar.iter_events()):
        row = by_id[ev.exchange_id].get(dates[ev.day])
        if row is None:
            continue
        present[idx] = True
        if ev.kind is EventKind.CLOSE:
            returns[idx] = math.log(row.close / row.open)
        else:
            last = prev_close[ev.exchange_id].get(dates[ev.day])
            # The very first session has no prior close; its open event
            # carries a zero return so every session still yields two events.
            returns[idx] = math.log(row.open / last) if last is not None else 0.0
    return EventReturns(calendar=calendar, returns=returns, present=present, dates=dates)


# ---------------------------------------------------------------------------
# Parameter files: named decimal fields in JSON.
# ---------------------------------------------------------------------------

PARAM_FIELDS = ("threshold", "zone_scale", "cap_scale", "noise_sd", "seed")


def load_params(path: str | Path) -> ModelParams:
    with Path(path).open() as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(PARAM_FIELDS) - {"noise_sd_by_exchange"}
    if unknown:
        raise InputError(f"{path}: unknown parameter fields {sorted(unknown)}")
    try:
        return ModelParams(
            threshold=float(raw["threshold"]),
            zone_scale=float(raw["zone_scale"]),
            cap_scale=float(raw["cap_scale"]),
            noise_sd=float(raw.get("noise_sd", 0.0)),
            seed=int(raw.get("seed", 0)),
            noise_sd_by_exchange=(
                tuple(float(x) for x in raw["noise_sd_by_exchange"])
                if "noise_sd_by_exchange" in raw
                else None
            ),
        )
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def params_dict(params: ModelParams) -> dict:
    d = {
        "threshold": params.threshold,
        "zone_scale": params.zone_scale,
        "cap_scale": params.cap_scale,
        "noise_sd": params.noise_sd,
        "seed": params.seed,
    }
    if params.noise_sd_by_exchange is not None:
        d["noise_sd_by_exchange"] = list(params.noise_sd_by_exchange)
    return d


def write_params(params: ModelParams, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        json.dump(params_dict(params), fh, indent=2, sort_keys=True)
        fh.write("\n")
