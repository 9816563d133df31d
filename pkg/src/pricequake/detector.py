"""Cause-and-effect detection: criticality, impact edges and quake records.

An exchange is critical at its own event when some counterpart's accumulated
stress on it exceeds the threshold. An impact edge j -> i exists at i's event
when j's weighted stress actually moved i's pricing past the threshold
(alone for single-index analysis, or as part of a same-signed cloud for
cloud analysis) and j itself was critical at its most recent event inside
i's inter-event window. Quakes grow from uninfluenced critical seeds along
time-increasing edges; each impact a record receives re-arms the impacted
member, so a record closes naturally once the wave dies out.
"""

from __future__ import annotations

import enum
import json
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pricequake.engine import EventOutcome, ModelParams, StressTensor
from pricequake.network import EventKind, MarketEvent


class Sign(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @property
    def flipped(self) -> "Sign":
        return Sign.NEGATIVE if self is Sign.POSITIVE else Sign.POSITIVE


class EdgeKind(enum.Enum):
    SINGLE = "single"
    MULTIPLE = "multiple"


class QuakeKind(enum.Enum):
    SIPQ = "sipq"
    CIPQ = "cipq"


EDGE_KIND_FOR_QUAKE = {QuakeKind.SIPQ: EdgeKind.SINGLE, QuakeKind.CIPQ: EdgeKind.MULTIPLE}


@dataclass(frozen=True, slots=True)
class CriticalityMark:
    """Exchange owning ``event`` is critical versus counterpart ``versus``."""

    event: MarketEvent
    versus: int
    sign: Sign


@dataclass(frozen=True, slots=True)
class ImpactEdge:
    """Directed impact: ``source`` moved ``target``'s pricing at ``at``.

    ``contributing`` is the set whose joint weighted stress crossed the
    threshold ({source} for single edges); ``source_critical_at`` is the
    source's own criticality event that qualified it as the cause.
    """

    source: int
    target: int
    at: MarketEvent
    kind: EdgeKind
    sign: Sign
    contributing: frozenset[int]
    source_critical_at: MarketEvent


@dataclass(frozen=True)
class AvalancheRecord:
    """One assembled price-quake.

    ``duration_events`` counts the activity steps after the seed (distinct
    calendar slots at which the record gained an edge); ``duration_days``
    is the real-valued span from the seed to the last edge in trading-day
    units. ``sources_without_influence`` are the members with zero
    in-degree: the seed plus any secondary sources that joined by impacting
    alongside the wave.
    """

    kind: QuakeKind
    sign: Sign
    source: int
    start: MarketEvent
    duration_events: int
    duration_days: float
    members: frozenset[int]
    edges: tuple[ImpactEdge, ...]
    sources_without_influence: frozenset[int]


def classify_critical(
    tensor: StressTensor | np.ndarray, event: MarketEvent, params: ModelParams
) -> list[CriticalityMark]:
    """Marks for every counterpart whose pre-event stress exceeds the threshold."""
    cum = tensor.cum if isinstance(tensor, StressTensor) else np.asarray(tensor)
    i = event.exchange_id
    r_c = params.threshold
    marks = []
    for j, v in enumerate(cum[i]):
        if j != i and (v > r_c or v < -r_c):
            marks.append(
                CriticalityMark(
                    event=event,
                    versus=j,
                    sign=Sign.POSITIVE if v > 0 else Sign.NEGATIVE,
                )
            )
    return marks


def marks_from_outcomes(outcomes: Iterable[EventOutcome]) -> list[CriticalityMark]:
    """Criticality marks of a whole outcome stream (gate-open entries, signed)."""
    marks = []
    for o in outcomes:
        for j, v in zip(o.active_sources, o.active_stress):
            marks.append(
                CriticalityMark(
                    event=o.event,
                    versus=j,
                    sign=Sign.POSITIVE if v > 0 else Sign.NEGATIVE,
                )
            )
    return marks


class _Timeline:
    """Per-exchange event positions for qualifying-cause lookups."""

    def __init__(self, outcomes: Sequence[EventOutcome]):
        self.keys_of: dict[int, list[tuple[int, int]]] = {}
        self.critical_of: dict[int, list[bool]] = {}
        self.events_of: dict[int, list[MarketEvent]] = {}
        self.prev_key: list[tuple[int, int] | None] = []
        last_key: tuple[int, int] | None = None
        for o in outcomes:
            key = o.event.order_key
            if last_key is not None and key < last_key:
                raise ValueError("outcomes must be in calendar order")
            last_key = key
            i = o.event.exchange_id
            own = self.keys_of.setdefault(i, [])
            self.prev_key.append(own[-1] if own else None)
            own.append(key)
            self.critical_of.setdefault(i, []).append(len(o.active_sources) > 0)
            self.events_of.setdefault(i, []).append(o.event)

    def qualifying_cause(
        self, source: int, window_lo: tuple[int, int] | None, before: tuple[int, int]
    ) -> MarketEvent | None:
        """Source's most recent critical... event in [window_lo, before).

        Returns the source's most recent event strictly before ``before`` and
        no earlier than ``window_lo``, provided the source was critical
        there; None otherwise.
        """
        keys = self.keys_of.get(source)
        if not keys:
            return None
        pos = bisect_left(keys, before) - 1
        if pos < 0:
            return None
        if window_lo is not None and keys[pos] < window_lo:
            return None
        if not self.critical_of[source][pos]:
            return None
        return self.events_of[source][pos]


def detect_impacts(
    outcomes: Sequence[EventOutcome],
    params: ModelParams,
    kind: EdgeKind = EdgeKind.SINGLE,
) -> list[ImpactEdge]:
    """Impact edges of the given kind carried by an outcome stream.

    Single: an edge j -> i whenever j's weighted pre-event stress on i
    exceeds the threshold on its own. Multiple: the gate-open counterparts
    with same-signed weighted stresses form a cloud; if the cloud's summed
    contribution crosses the threshold, one edge per cloud member is
    emitted with the full cloud as ``contributing``. Either way the source
    must have been critical at its most recent event inside the target's
    inter-event window.
    """
    timeline = _Timeline(outcomes)
    r_c = params.threshold
    edges: list[ImpactEdge] = []
    for idx, o in enumerate(outcomes):
        if not o.active_sources:
            continue
        i = o.event.exchange_id
        key = o.event.order_key
        window_lo = timeline.prev_key[idx]
        qualified: list[tuple[int, float, MarketEvent]] = []
        for j, v, w in zip(o.active_sources, o.active_stress, o.active_weight):
            cause = timeline.qualifying_cause(j, window_lo, key)
            if cause is not None:
                qualified.append((j, w * v, cause))
        if not qualified:
            continue
        if kind is EdgeKind.SINGLE:
            for j, c, cause in qualified:
                if abs(c) > r_c:
                    edges.append(
                        ImpactEdge(
                            source=j,
                            target=i,
                            at=o.event,
                            kind=kind,
                            sign=Sign.POSITIVE if c > 0 else Sign.NEGATIVE,
                            contributing=frozenset((j,)),
                            source_critical_at=cause,
                        )
                    )
        else:
            for sign, wanted in ((Sign.POSITIVE, 1.0), (Sign.NEGATIVE, -1.0)):
                cloud = [(j, c, cause) for j, c, cause in qualified if c * wanted > 0]
                if not cloud:
                    continue
                total = sum(c for _, c, _ in cloud)
                if abs(total) > r_c:
                    contributing = frozenset(j for j, _, _ in cloud)
                    for j, _, cause in cloud:
                        edges.append(
                            ImpactEdge(
                                source=j,
                                target=i,
                                at=o.event,
                                kind=kind,
                                sign=sign,
                                contributing=contributing,
                                source_critical_at=cause,
                            )
                        )
    return edges


class _Builder:
    """Mutable state of one growing quake record.

    Arming is one-shot and generational: a member's impacts qualify only
    when caused by the criticality at which it entered the record (the
    seed's criticality, the event where it was first impacted, or a
    secondary source's qualifying criticality), so a record closes once
    its recruitment front dies out.
    """

    __slots__ = ("sign", "source", "start", "entry", "edges")

    def __init__(self, sign: Sign, source: int, start: MarketEvent):
        self.sign = sign
        self.source = source
        self.start = start
        self.entry: dict[int, MarketEvent] = {source: start}
        self.edges: list[ImpactEdge] = []

    def armed_at(self, exchange: int, key: tuple[int, int]) -> bool:
        ev = self.entry.get(exchange)
        return ev is not None and ev.order_key == key

    def recruit(self, exchange: int, event: MarketEvent) -> bool:
        if exchange in self.entry:
            return False
        self.entry[exchange] = event
        return True


def assemble_quakes(
    edges: Sequence[ImpactEdge],
    marks: Sequence[CriticalityMark],
    kind: QuakeKind,
) -> list[AvalancheRecord]:
    """Group edges into quake records seeded at uninfluenced criticalities.

    A record grows only through impacts caused by the criticality at which
    a member entered: the seed's own criticality, the event at which a
    member was first impacted by the record, or the qualifying criticality
    of an uninfluenced co-impactor that struck the same target alongside a
    member edge (a secondary source). Later re-impacts of an existing
    member are recorded (they extend the duration) but do not re-arm it.
    Edges of the opposite sign never extend a record, and edges aimed at
    the record's own seed are not absorbed, so the seed keeps zero
    in-degree. A record whose edge set is contained in another record's is
    dropped as a duplicate wave (ties keep the earlier seed, then the
    smaller source id); records with no edges are not quakes.
    """
    edges = sorted(edges, key=lambda e: (e.at.order_key, e.target, e.source))

    influenced: set[tuple[int, tuple[int, int]]] = {
        (e.target, e.at.order_key) for e in edges
    }

    # Static seed set: critical and uninfluenced at the criticality event.
    crit_signs: dict[tuple[int, tuple[int, int]], set[Sign]] = {}
    crit_event: dict[tuple[int, tuple[int, int]], MarketEvent] = {}
    for m in marks:
        k = (m.event.exchange_id, m.event.order_key)
        crit_signs.setdefault(k, set()).add(m.sign)
        crit_event[k] = m.event
    builders: list[_Builder] = []
    arming_index: dict[tuple[int, tuple[int, int]], list[_Builder]] = {}
    for (ex, key), signs in sorted(
        crit_signs.items(), key=lambda kv: (kv[0][1], kv[0][0])
    ):
        if (ex, key) in influenced:
            continue
        for sign in sorted(signs, key=lambda s: s.value, reverse=True):
            b = _Builder(sign, ex, crit_event[(ex, key)])
            builders.append(b)
            arming_index.setdefault((ex, key), []).append(b)

    # Group edges by target event, in calendar order.
    by_target: dict[tuple[tuple[int, int], int], list[ImpactEdge]] = {}
    for e in edges:
        by_target.setdefault((e.at.order_key, e.target), []).append(e)

    for (key, target), incoming in sorted(by_target.items()):
        for sign in (Sign.POSITIVE, Sign.NEGATIVE):
            same_sign = [e for e in incoming if e.sign is sign]
            if not same_sign:
                continue
            candidates: list[_Builder] = []
            seen: set[int] = set()
            for e in same_sign:
                for b in arming_index.get((e.source, e.source_critical_at.order_key), ()):
                    if b.sign is sign and id(b) not in seen:
                        seen.add(id(b))
                        candidates.append(b)
            for b in candidates:
                if target == b.source:
                    continue  # keep the seed's in-degree at zero
                member_edges = [
                    e
                    for e in same_sign
                    if b.armed_at(e.source, e.source_critical_at.order_key)
                ]
                if not member_edges:
                    continue
                b.edges.extend(member_edges)
                if b.recruit(target, member_edges[0].at):
                    arming_index.setdefault((target, key), []).append(b)
                for e in same_sign:
                    if e in member_edges:
                        continue
                    src_key = (e.source, e.source_critical_at.order_key)
                    if src_key in influenced:
                        continue  # an influenced co-impactor belongs to its own wave
                    if e.source_critical_at.order_key < b.start.order_key:
                        continue  # secondary sources must fire inside the window
                    if b.recruit(e.source, e.source_critical_at):
                        b.edges.append(e)
                        arming_index.setdefault(src_key, []).append(b)

    records = [_finalize(b, kind) for b in builders if b.edges]
    return _drop_subsumed(records)


def _finalize(b: _Builder, kind: QuakeKind) -> AvalancheRecord:
    edge_tuple = tuple(b.edges)
    targets_with_incoming = {e.target for e in edge_tuple}
    members = frozenset(b.entry)
    last_time = max(e.at.time_days for e in edge_tuple)
    activity_keys = {e.at.order_key for e in edge_tuple}
    return AvalancheRecord(
        kind=kind,
        sign=b.sign,
        source=b.source,
        start=b.start,
        duration_events=len(activity_keys),
        duration_days=last_time - b.start.time_days,
        members=members,
        edges=edge_tuple,
        sources_without_influence=members - targets_with_incoming,
    )


def _drop_subsumed(records: list[AvalancheRecord]) -> list[AvalancheRecord]:
    """Drop records whose edges are contained in another record of same sign."""
    order = sorted(
        range(len(records)),
        key=lambda i: (records[i].start.order_key, records[i].source),
    )
    rank_of = {i: rank for rank, i in enumerate(order)}
    edge_sets = [set(r.edges) for r in records]
    owners: dict[ImpactEdge, list[int]] = {}
    for i in order:
        for e in records[i].edges:
            owners.setdefault(e, []).append(i)
    keep = [True] * len(records)
    for rank, i in enumerate(order):
        mine = edge_sets[i]
        first = records[i].edges[0]
        for j in owners[first]:
            if j == i or not keep[j] or records[j].sign is not records[i].sign:
                continue
            other = edge_sets[j]
            if mine < other or (mine == other and rank_of[j] < rank):
                keep[i] = False
                break
    return [records[i] for i in order if keep[i]]


def detect_quakes(
    outcomes: Sequence[EventOutcome],
    params: ModelParams,
    kind: QuakeKind,
) -> tuple[list[AvalancheRecord], list[ImpactEdge], list[CriticalityMark]]:
    """Full detection pipeline over an outcome stream."""
    marks = marks_from_outcomes(outcomes)
    edges = detect_impacts(outcomes, params, EDGE_KIND_FOR_QUAKE[kind])
    return assemble_quakes(edges, marks, kind), edges, marks


# ---------------------------------------------------------------------------
# Node roles and the raster view.
# ---------------------------------------------------------------------------

NOT_INFLUENCED_NOT_IMPACTING = "critical_not_influenced_not_impacting"
NOT_INFLUENCED_IMPACTING = "critical_not_influenced_impacting"
INFLUENCED = "critical_influenced"
ROLES = (NOT_INFLUENCED_NOT_IMPACTING, NOT_INFLUENCED_IMPACTING, INFLUENCED)


def classify_roles(
    marks: Sequence[CriticalityMark], edges: Sequence[ImpactEdge]
) -> dict[tuple[int, tuple[int, int], Sign], str]:
    """Role of every criticality occurrence, keyed by (exchange, slot, sign).

    Sign-matched: a positively critical node counts as influenced/impacting
    only through positive edges.
    """
    influenced_at = {(e.target, e.at.order_key, e.sign) for e in edges}
    impacting_at = {
        (e.source, e.source_critical_at.order_key, e.sign) for e in edges
    }
    roles: dict[tuple[int, tuple[int, int], Sign], str] = {}
    for m in marks:
        k = (m.event.exchange_id, m.event.order_key, m.sign)
        if k in roles:
            continue
        if k in influenced_at:
            roles[k] = INFLUENCED
        elif k in impacting_at:
            roles[k] = NOT_INFLUENCED_IMPACTING
        else:
            roles[k] = NOT_INFLUENCED_NOT_IMPACTING
    return roles


RASTER_NOT_CRITICAL = 0
RASTER_INFLUENCED = 1
RASTER_SOURCE = 2
RASTER_EXCLUDED = 3


def raster(
    outcomes: Sequence[EventOutcome],
    marks: Sequence[CriticalityMark],
    edges: Sequence[ImpactEdge],
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Grid view of a stream: rows are event slots, columns exchanges.

    Cell codes: 0 not critical, 1 critical and influenced, 2 critical
    uninfluenced but impacting (a source), 3 critical but excluded.
    """
    keys = sorted({o.event.order_key for o in outcomes})
    row_of = {k: r for r, k in enumerate(keys)}
    n = 1 + max(o.event.exchange_id for o in outcomes)
    grid = np.zeros((len(keys), n), dtype=np.int8)
    code = {
        INFLUENCED: RASTER_INFLUENCED,
        NOT_INFLUENCED_IMPACTING: RASTER_SOURCE,
        NOT_INFLUENCED_NOT_IMPACTING: RASTER_EXCLUDED,
    }
    for (ex, key, _sign), role in classify_roles(marks, edges).items():
        grid[row_of[key], ex] = max(grid[row_of[key], ex], code[role])
    return keys, grid


# ---------------------------------------------------------------------------
# Serialization (line-delimited JSON).
# ---------------------------------------------------------------------------


def event_to_dict(ev: MarketEvent) -> dict:
    return {
        "exchange": ev.exchange_id,
        "kind": ev.kind.value,
        "day": ev.day,
        "slot": ev.slot,
        "utc_hour": ev.utc_hour,
    }


def event_from_dict(d: dict) -> MarketEvent:
    return MarketEvent(
        exchange_id=d["exchange"],
        kind=EventKind(d["kind"]),
        day=d["day"],
        slot=d["slot"],
        utc_hour=d["utc_hour"],
    )


def edge_to_dict(e: ImpactEdge) -> dict:
    return {
        "source": e.source,
        "target": e.target,
        "at": event_to_dict(e.at),
        "kind": e.kind.value,
        "sign": e.sign.value,
        "contributing": sorted(e.contributing),
        "source_critical_at": event_to_dict(e.source_critical_at),
    }


def edge_from_dict(d: dict) -> ImpactEdge:
    return ImpactEdge(
        source=d["source"],
        target=d["target"],
        at=event_from_dict(d["at"]),
        kind=EdgeKind(d["kind"]),
        sign=Sign(d["sign"]),
        contributing=frozenset(d["contributing"]),
        source_critical_at=event_from_dict(d["source_critical_at"]),
    )


def write_records(path: str | Path, records: Sequence[AvalancheRecord]) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "kind": r.kind.value,
                        "sign": r.sign.value,
                        "source": r.source,
                        "start": event_to_dict(r.start),
                        "duration_events": r.duration_events,
                        "duration_days": r.duration_days,
                        "members": sorted(r.members),
                        "edges": [edge_to_dict(e) for e in r.edges],
                        "sources_without_influence": sorted(r.sources_without_influence),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_records(path: str | Path) -> list[AvalancheRecord]:
    records = []
    with Path(path).open() as fh:
        for line in fh:
            d = json.loads(line)
            records.append(
                AvalancheRecord(
                    kind=QuakeKind(d["kind"]),
                    sign=Sign(d["sign"]),
                    source=d["source"],
                    start=event_from_dict(d["start"]),
                    duration_events=d["duration_events"],
                    duration_days=d["duration_days"],
                    members=frozenset(d["members"]),
                    edges=tuple(edge_from_dict(e) for e in d["edges"]),
                    sources_without_influence=frozenset(d["sources_without_influence"]),
                )
            )
    return records


def write_marks(path: str | Path, marks: Sequence[CriticalityMark]) -> None:
    with Path(path).open("w") as fh:
        for m in marks:
            fh.write(
                json.dumps(
                    {"event": event_to_dict(m.event), "versus": m.versus, "sign": m.sign.value},
                    sort_keys=True,
                )
                + "\n"
            )


def read_marks(path: str | Path) -> list[CriticalityMark]:
    marks = []
    with Path(path).open() as fh:
        for line in fh:
            d = json.loads(line)
            marks.append(
                CriticalityMark(
                    event=event_from_dict(d["event"]), versus=d["versus"], sign=Sign(d["sign"])
                )
            )
    return marks
