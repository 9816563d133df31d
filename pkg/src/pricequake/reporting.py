"""Summary statistics over quake records: counts, roles, degrees, sources, PDFs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pricequake.detector import (
    INFLUENCED,
    NOT_INFLUENCED_IMPACTING,
    NOT_INFLUENCED_NOT_IMPACTING,
    AvalancheRecord,
    CriticalityMark,
    ImpactEdge,
    Sign,
    classify_roles,
)

SIGNS = (Sign.POSITIVE, Sign.NEGATIVE)


@dataclass(frozen=True)
class SummaryRow:
    count: int
    mean_members: float
    mean_duration_days: float


@dataclass(frozen=True)
class QuakeSummary:
    """Counts and averages per sign; the total row is count-weighted."""

    positive: SummaryRow
    negative: SummaryRow
    total: SummaryRow


def _summary_row(records: Sequence[AvalancheRecord]) -> SummaryRow:
    if not records:
        return SummaryRow(0, 0.0, 0.0)
    return SummaryRow(
        count=len(records),
        mean_members=float(np.mean([len(r.members) for r in records])),
        mean_duration_days=float(np.mean([r.duration_days for r in records])),
    )


def summarize(records: Sequence[AvalancheRecord]) -> QuakeSummary:
    """Per-sign counts, mean member counts and mean durations."""
    return QuakeSummary(
        positive=_summary_row([r for r in records if r.sign is Sign.POSITIVE]),
        negative=_summary_row([r for r in records if r.sign is Sign.NEGATIVE]),
        total=_summary_row(records),
    )


@dataclass(frozen=True)
class RoleTable:
    """Criticality-role counts per exchange and sign.

    ``counts[i, s, k]``: exchange i, sign s (0 positive, 1 negative), role k
    in (not influenced & not impacting, not influenced & impacting,
    influenced). A criticality occurrence is one (exchange, event slot,
    sign) triple.
    """

    counts: np.ndarray

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    def percentages(self) -> np.ndarray:
        """Role shares per exchange with signs pooled; rows sum to 100."""
        pooled = self.counts.sum(axis=1).astype(float)
        totals = pooled.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(totals > 0, 100.0 * pooled / totals, 0.0)
        return pct


_ROLE_INDEX = {NOT_INFLUENCED_NOT_IMPACTING: 0, NOT_INFLUENCED_IMPACTING: 1, INFLUENCED: 2}


def _record_edges(records: Sequence[AvalancheRecord]) -> list[ImpactEdge]:
    seen: set[ImpactEdge] = set()
    out = []
    for r in records:
        for e in r.edges:
            if e not in seen:
                seen.add(e)
                out.append(e)
    return out


def role_counts(
    records: Sequence[AvalancheRecord],
    marks: Sequence[CriticalityMark],
    n_exchanges: int | None = None,
    edges: Sequence[ImpactEdge] | None = None,
) -> RoleTable:
    """Tally the three mutually exclusive critical roles per exchange and sign.

    Influence and impact are judged against ``edges`` when given (the full
    detected edge list), otherwise against the union of the records' edges.
    """
    if edges is None:
        edges = _record_edges(records)
    if n_exchanges is None:
        n_exchanges = 1 + max(
            [m.event.exchange_id for m in marks]
            + [e.source for e in edges]
            + [e.target for e in edges],
            default=-1,
        )
    counts = np.zeros((n_exchanges, 2, 3), dtype=np.int64)
    for (ex, _key, sign), role in classify_roles(marks, edges).items():
        counts[ex, 0 if sign is Sign.POSITIVE else 1, _ROLE_INDEX[role]] += 1
    return RoleTable(counts)


@dataclass(frozen=True)
class DegreeTable:
    """Mean in/out-degree per exchange over all quakes of each sign.

    Axis 1 indexes (positive, negative, both); absence from a quake counts
    as degree zero, which is what makes the network-wide in/out balance
    exact: every edge contributes one head and one tail, so the integer
    edge totals cancel before any division.
    """

    in_mean: np.ndarray
    out_mean: np.ndarray
    in_total: np.ndarray
    out_total: np.ndarray
    quake_counts: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.in_mean - self.out_mean

    @property
    def network_delta(self) -> np.ndarray:
        """Network-wide mean(in) - mean(out) per sign column; identically 0."""
        n = len(self.in_mean)
        diff = self.in_total.sum(axis=0) - self.out_total.sum(axis=0)
        denom = np.maximum(n * self.quake_counts, 1)
        return diff / denom


def degree_stats(
    records: Sequence[AvalancheRecord], n_exchanges: int | None = None
) -> DegreeTable:
    """Average each exchange's per-quake in- and out-degree, by sign."""
    if n_exchanges is None:
        n_exchanges = 1 + max(
            (max(r.members) for r in records if r.members), default=-1
        )
    in_total = np.zeros((n_exchanges, 3), dtype=np.int64)
    out_total = np.zeros((n_exchanges, 3), dtype=np.int64)
    counts = np.zeros(3, dtype=np.int64)
    for r in records:
        cols = [0 if r.sign is Sign.POSITIVE else 1, 2]
        counts[cols] += 1
        for e in r.edges:
            in_total[e.target, cols] += 1
            out_total[e.source, cols] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        in_mean = np.where(counts > 0, in_total / counts, 0.0)
        out_mean = np.where(counts > 0, out_total / counts, 0.0)
    return DegreeTable(
        in_mean=in_mean,
        out_mean=out_mean,
        in_total=in_total,
        out_total=out_total,
        quake_counts=counts,
    )


def source_ranking(
    records: Sequence[AvalancheRecord], n_exchanges: int | None = None
) -> list[tuple[int, float]]:
    """Share of quakes each exchange seeds, sorted descending (ties by id)."""
    if n_exchanges is None:
        n_exchanges = 1 + max((r.source for r in records), default=-1)
    seeds = np.zeros(n_exchanges)
    for r in records:
        seeds[r.source] += 1
    share = seeds / len(records) if records else seeds
    return sorted(
        ((i, float(share[i])) for i in range(n_exchanges)),
        key=lambda t: (-t[1], t[0]),
    )


def spread_by_source(
    records: Sequence[AvalancheRecord], n_exchanges: int | None = None
) -> np.ndarray:
    """Mean member count of the quakes each exchange seeds.

    Shape (n, 3): columns are (positive, negative, both); exchanges that
    never seed report 0.
    """
    if n_exchanges is None:
        n_exchanges = 1 + max((r.source for r in records), default=-1)
    total = np.zeros((n_exchanges, 3))
    count = np.zeros((n_exchanges, 3))
    for r in records:
        cols = [0 if r.sign is Sign.POSITIVE else 1, 2]
        total[r.source, cols] += len(r.members)
        count[r.source, cols] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / count, 0.0)


def distribution(
    records: Sequence[AvalancheRecord], measure: str = "size"
) -> list[tuple[float, float, float]]:
    """Log-binned (base 2) probability mass of quake sizes or durations.

    Returns (bin_low, bin_high, probability) rows over occupied and
    intermediate bins; probabilities over all rows sum to 1. ``size`` is
    the member count, ``duration`` the activity-step count.
    """
    if not records:
        raise ValueError("distribution of an empty record list")
    if measure == "size":
        values = np.array([len(r.members) for r in records], dtype=float)
    elif measure == "duration":
        values = np.array([r.duration_events for r in records], dtype=float)
    else:
        raise ValueError(f"unknown measure {measure!r}")
    top = int(np.floor(np.log2(values.max()))) + 1
    edges = 2.0 ** np.arange(0, top + 1)
    counts, _ = np.histogram(values, bins=edges)
    probs = counts / counts.sum()
    return [
        (float(edges[k]), float(edges[k + 1]), float(probs[k]))
        for k in range(len(probs))
    ]


# ---------------------------------------------------------------------------
# CSV emission. Exchange names are optional; ids are always written.
# ---------------------------------------------------------------------------


def _names(n: int, names: Sequence[str] | None) -> list[str]:
    if names is None:
        return [str(i) for i in range(n)]
    return list(names)


def write_summary_csv(path: str | Path, summary: QuakeSummary) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sign", "count", "mean_members", "mean_duration_days"])
        for label, row in (
            ("negative", summary.negative),
            ("positive", summary.positive),
            ("total", summary.total),
        ):
            w.writerow([label, row.count, repr(row.mean_members), repr(row.mean_duration_days)])


def write_roles_csv(
    path: str | Path, table: RoleTable, names: Sequence[str] | None = None
) -> None:
    cols = [
        "pos_not_influenced_not_impacting",
        "pos_not_influenced_impacting",
        "pos_influenced",
        "neg_not_influenced_not_impacting",
        "neg_not_influenced_impacting",
        "neg_influenced",
    ]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exchange"] + cols + ["total"])
        for i, name in enumerate(_names(len(table.counts), names)):
            row = list(table.counts[i, 0]) + list(table.counts[i, 1])
            w.writerow([name] + [int(x) for x in row] + [int(table.row_totals[i])])


def write_roles_pct_csv(
    path: str | Path, table: RoleTable, names: Sequence[str] | None = None
) -> None:
    pct = table.percentages()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "exchange",
                "critical_not_influenced_not_impacting_pct",
                "critical_not_influenced_impacting_pct",
                "critical_influenced_pct",
            ]
        )
        for i, name in enumerate(_names(len(pct), names)):
            w.writerow([name] + [repr(float(x)) for x in pct[i]])


def write_degrees_csv(
    path: str | Path, table: DegreeTable, names: Sequence[str] | None = None
) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        header = ["exchange"]
        for tag in ("pos", "neg", "all"):
            header += [f"{tag}_in_degree", f"{tag}_out_degree", f"{tag}_delta_in_out"]
        w.writerow(header)
        n = len(table.in_mean)
        delta = table.delta
        for i, name in enumerate(_names(n, names)):
            row = [name]
            for c in range(3):
                row += [
                    repr(float(table.in_mean[i, c])),
                    repr(float(table.out_mean[i, c])),
                    repr(float(delta[i, c])),
                ]
            w.writerow(row)
        net = table.network_delta
        n = max(len(table.in_mean), 1)
        denom = np.maximum(n * table.quake_counts, 1)
        row = ["network_mean"]
        for c in range(3):
            row += [
                repr(float(table.in_total[:, c].sum() / denom[c])),
                repr(float(table.out_total[:, c].sum() / denom[c])),
                repr(float(net[c])),
            ]
        w.writerow(row)


def write_sources_csv(
    path: str | Path, ranking: list[tuple[int, float]], names: Sequence[str] | None = None
) -> None:
    lookup = _names(1 + max((i for i, _ in ranking), default=-1), names)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exchange", "seed_share"])
        for i, share in ranking:
            w.writerow([lookup[i], repr(share)])


def write_spread_csv(
    path: str | Path, spread: np.ndarray, names: Sequence[str] | None = None
) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exchange", "pos_mean_members", "neg_mean_members", "all_mean_members"])
        for i, name in enumerate(_names(len(spread), names)):
            w.writerow([name] + [repr(float(x)) for x in spread[i]])


def write_distribution_csv(
    path: str | Path, rows: list[tuple[float, float, float]]
) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "probability"])
        for lo, hi, p in rows:
            w.writerow([repr(lo), repr(hi), repr(p)])
