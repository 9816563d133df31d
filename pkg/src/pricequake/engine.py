"""Core stress dynamics between exchanges.

Each pair (i, j) carries a cumulative stress entry: the return of exchange j
accumulated since exchange i last priced it in. At every open/close of i the
entries above the behavioral threshold enter i's return (capitalization- and
time-zone-weighted, averaged over the gate-open set) and are reset; i's own
return is then pushed onto every other exchange's stress toward i, where an
entry still above threshold is first discarded as stale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pricequake import _kernels
from pricequake.network import EventCalendar, EventKind, ExchangeSpec, MarketEvent, time_zone_gap

DEFAULT_WARMUP_DAYS = 250


class InputError(ValueError):
    """Invalid data handed to the engine (non-finite news, length mismatch)."""


class NumericalError(RuntimeError):
    """A run produced a non-finite return; the run is aborted."""


@dataclass(frozen=True, slots=True)
class ModelParams:
    """The model's free parameters plus the RNG seed.

    ``threshold`` is the stress level above which accumulated cross-market
    stress gets priced in; ``zone_scale`` (hours) and ``cap_scale`` set the
    decay of the time-zone and capitalization weightings; ``noise_sd`` is the
    standard deviation of the local-news term (optionally per exchange).
    """

    threshold: float
    zone_scale: float
    cap_scale: float
    noise_sd: float
    seed: int = 0
    noise_sd_by_exchange: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if self.zone_scale <= 0:
            raise ValueError("zone_scale must be > 0")
        if self.cap_scale <= 0:
            raise ValueError("cap_scale must be > 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.noise_sd_by_exchange is not None and any(
            s < 0 for s in self.noise_sd_by_exchange
        ):
            raise ValueError("per-exchange noise_sd must be >= 0")

    def sigma_vector(self, n: int) -> np.ndarray:
        """Per-exchange noise standard deviations as an array of length n."""
        if self.noise_sd_by_exchange is None:
            return np.full(n, self.noise_sd)
        if len(self.noise_sd_by_exchange) != n:
            raise ValueError(
                f"noise_sd_by_exchange has {len(self.noise_sd_by_exchange)} entries, expected {n}"
            )
        return np.asarray(self.noise_sd_by_exchange, dtype=float)


def alpha_weight(i: ExchangeSpec, j: ExchangeSpec, params: ModelParams) -> float:
    """Capitalization weighting of j's impact on i: 1 - exp(-K_j / (K_i * scale))."""
    return 1.0 - math.exp(-j.capitalization / (i.capitalization * params.cap_scale))


def beta_weight(
    i: ExchangeSpec, j: ExchangeSpec, params: ModelParams, circular: bool = False
) -> float:
    """Time-zone weighting of j's impact on i: exp(-gap / scale)."""
    return math.exp(-time_zone_gap(i, j, circular=circular) / params.zone_scale)


@dataclass(frozen=True)
class CouplingWeights:
    """Precomputed pairwise weights; ``product[i, j]`` multiplies j's stress on i."""

    alpha: np.ndarray
    beta: np.ndarray
    product: np.ndarray

    @classmethod
    def build(
        cls,
        exchanges: Sequence[ExchangeSpec],
        params: ModelParams,
        circular: bool = False,
    ) -> "CouplingWeights":
        n = len(exchanges)
        alpha = np.zeros((n, n))
        beta = np.zeros((n, n))
        for i, ei in enumerate(exchanges):
            for j, ej in enumerate(exchanges):
                if i == j:
                    continue
                alpha[i, j] = alpha_weight(ei, ej, params)
                beta[i, j] = beta_weight(ei, ej, params, circular=circular)
        return cls(alpha=alpha, beta=beta, product=alpha * beta)


@dataclass(frozen=True)
class StressTensor:
    """N x N cumulative stress field; entry (i, j) is j's stress on i."""

    cum: np.ndarray

    def __post_init__(self) -> None:
        arr = self.cum
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("stress tensor must be square")
        if not np.all(np.isfinite(arr)):
            raise ValueError("stress tensor entries must be finite")
        if np.any(np.diagonal(arr) != 0.0):
            raise ValueError("stress tensor diagonal must be zero")

    @classmethod
    def zeros(cls, n: int) -> "StressTensor":
        return cls(np.zeros((n, n)))

    @property
    def n(self) -> int:
        return self.cum.shape[0]

    def copy(self) -> "StressTensor":
        return StressTensor(self.cum.copy())


@dataclass(frozen=True, slots=True)
class EventOutcome:
    """What happened at one market event.

    ``active_sources`` lists the counterparts whose stress exceeded the
    threshold on the pre-event tensor (ascending id), with the corresponding
    pre-event stresses and combined weights in the parallel tuples.
    ``reset_set`` holds the tensor entries re-initialized by this event:
    the priced-in row entries plus the column entries discarded by the push.
    In replay mode ``noise`` is the recovered residual.
    """

    event: MarketEvent
    ret: float
    noise: float
    coupling_term: float
    active_sources: tuple[int, ...]
    active_stress: tuple[float, ...]
    active_weight: tuple[float, ...]
    reset_set: tuple[tuple[int, int], ...]

    @property
    def active_set(self) -> frozenset[int]:
        return frozenset(self.active_sources)

    @property
    def n_star(self) -> int:
        return len(self.active_sources)


class PricePoint:
    __slots__ = ("event", "price", "ret")

    def __init__(self, event: MarketEvent, price: float, ret: float):
        self.event = event
        self.price = price
        self.ret = ret


@dataclass(frozen=True)
class PriceSeries:
    """Per-exchange price paths, P(t) = P(t-1) * exp(ret(t)), starting at 1."""

    points: dict[int, list[PricePoint]]

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[EventOutcome], n: int) -> "PriceSeries":
        points: dict[int, list[PricePoint]] = {i: [] for i in range(n)}
        price = np.ones(n)
        for out in outcomes:
            i = out.event.exchange_id
            price[i] *= math.exp(out.ret)
            points[i].append(PricePoint(out.event, float(price[i]), out.ret))
        return cls(points)


@dataclass(frozen=True)
class SimulationResult:
    """Full outcome stream of one generated run plus the warm-up marker.

    Statistics downstream must start at ``outcomes[warmup_events:]``; the
    full stream is kept so a replay of the emitted returns reproduces the
    run exactly.
    """

    outcomes: list[EventOutcome]
    prices: PriceSeries
    noise: np.ndarray
    warmup_events: int
    params: ModelParams
    calendar: EventCalendar
    tensors: list[np.ndarray] | None = None

    @property
    def post_warmup(self) -> list[EventOutcome]:
        return self.outcomes[self.warmup_events :]

    def returns(self) -> np.ndarray:
        return np.array([o.ret for o in self.outcomes])


@dataclass(frozen=True)
class ReplayResult:
    """Outcome stream of a replayed run; ``residuals`` aligns with ``outcomes``."""

    outcomes: list[EventOutcome]
    residuals: np.ndarray
    warmup_events: int
    params: ModelParams
    calendar: EventCalendar
    tensors: list[np.ndarray] | None = None

    @property
    def post_warmup(self) -> list[EventOutcome]:
        return self.outcomes[self.warmup_events :]


def calendar_arrays(calendar: EventCalendar) -> tuple[np.ndarray, np.ndarray]:
    """Flatten the calendar into (event exchange ids, group offsets)."""
    ev_ex = []
    group_start = [0]
    for group in calendar.iter_groups():
        for ev in group:
            ev_ex.append(ev.exchange_id)
        group_start.append(len(ev_ex))
    return np.asarray(ev_ex, dtype=np.int64), np.asarray(group_start, dtype=np.int64)


def draw_noise(calendar: EventCalendar, params: ModelParams) -> np.ndarray:
    """Gaussian news draws for every calendar event.

    The top-level seed is expanded into one substream per exchange (in
    exchange-id order), so an exchange's draw sequence does not depend on
    how the calendar interleaves events.
    """
    n = calendar.n_exchanges
    children = np.random.SeedSequence(params.seed).spawn(n)
    sd = params.sigma_vector(n)
    counts = np.zeros(n, dtype=int)
    for ev in calendar.iter_events():
        counts[ev.exchange_id] += 1
    draws = [
        np.random.Generator(np.random.PCG64(children[i])).normal(0.0, sd[i], counts[i])
        for i in range(n)
    ]
    out = np.empty(calendar.event_count)
    cursor = np.zeros(n, dtype=int)
    for pos, ev in enumerate(calendar.iter_events()):
        i = ev.exchange_id
        out[pos] = draws[i][cursor[i]]
        cursor[i] += 1
    return out


def evaluate_event(
    tensor: StressTensor,
    event: MarketEvent,
    news: float,
    params: ModelParams,
    weights: CouplingWeights,
) -> tuple[EventOutcome, StressTensor]:
    """Evaluate a single event against the pre-event tensor.

    Reference implementation of one dynamics step; the batch kernels must
    agree with a chain of these bit for bit. Returns the outcome and the
    updated tensor (the input is not mutated).
    """
    if not math.isfinite(news):
        raise InputError(f"non-finite news term at {event}")
    r_c = params.threshold
    i = event.exchange_id
    cum = tensor.cum
    n = tensor.n

    sources: list[int] = []
    stresses: list[float] = []
    ws: list[float] = []
    coupling = 0.0
    for j in range(n):
        v = cum[i, j]
        if j != i and (v > r_c or v < -r_c):
            sources.append(j)
            stresses.append(v)
            w = weights.product[i, j]
            ws.append(w)
            coupling += w * v
    coupling = coupling / len(sources) if sources else 0.0
    ret = coupling + news
    if not math.isfinite(ret):
        raise NumericalError(f"non-finite return at {event}")

    new = cum.copy()
    resets: list[tuple[int, int]] = [(i, j) for j in sources]
    for j in sources:
        new[i, j] = 0.0
    for k in range(n):
        if k == i:
            continue
        v = new[k, i]
        if v > r_c or v < -r_c:
            new[k, i] = 0.0
            resets.append((k, i))
        new[k, i] += ret

    outcome = EventOutcome(
        event=event,
        ret=ret,
        noise=news,
        coupling_term=coupling,
        active_sources=tuple(sources),
        active_stress=tuple(stresses),
        active_weight=tuple(ws),
        reset_set=tuple(resets),
    )
    return outcome, StressTensor(new)


def _run_python(
    n: int,
    ev_ex: np.ndarray,
    group_start: np.ndarray,
    weights: np.ndarray,
    r_c: float,
    drive: np.ndarray,
    present: np.ndarray,
    replay_mode: bool,
    capture_tensors: bool = False,
):
    """Pure-Python twin of the numba kernel, with optional tensor capture."""
    E = len(ev_ex)
    tensor = np.zeros((n, n))
    ret = np.full(E, np.nan)
    coup = np.full(E, np.nan)
    nstar = np.zeros(E, dtype=np.int64)
    act_off = np.zeros(E + 1, dtype=np.int64)
    col_off = np.zeros(E + 1, dtype=np.int64)
    act_src: list[int] = []
    act_val: list[float] = []
    col_src: list[int] = []
    tensors: list[np.ndarray] | None = [] if capture_tensors else None

    for g in range(len(group_start) - 1):
        start, end = group_start[g], group_start[g + 1]
        if capture_tensors:
            snap = tensor.copy()
            for _ in range(start, end):
                tensors.append(snap)
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                ns = 0
                c = 0.0
                for j in range(n):
                    v = tensor[i, j]
                    if j != i and (v > r_c or v < -r_c):
                        ns += 1
                        c += weights[i, j] * v
                        act_src.append(j)
                        act_val.append(v)
                c = c / ns if ns else 0.0
                coup[idx] = c
                nstar[idx] = ns
                ret[idx] = drive[idx] if replay_mode else c + drive[idx]
            act_off[idx + 1] = len(act_src)
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                for p in range(act_off[idx], act_off[idx + 1]):
                    tensor[i, act_src[p]] = 0.0
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                r = ret[idx]
                for k in range(n):
                    if k == i:
                        continue
                    v = tensor[k, i]
                    if v > r_c or v < -r_c:
                        tensor[k, i] = 0.0
                        col_src.append(k)
                    tensor[k, i] += r
            col_off[idx + 1] = len(col_src)

    return (
        ret,
        coup,
        nstar,
        act_off,
        np.asarray(act_src, dtype=np.int64),
        np.asarray(act_val, dtype=float),
        col_off,
        np.asarray(col_src, dtype=np.int64),
        tensors,
    )


def _run_kernel(n, ev_ex, group_start, weights, r_c, drive, present, replay_mode):
    E = len(ev_ex)
    ret = np.full(E, np.nan)
    coup = np.full(E, np.nan)
    nstar = np.zeros(E, dtype=np.int64)
    act_off = np.zeros(E + 1, dtype=np.int64)
    col_off = np.zeros(E + 1, dtype=np.int64)
    cap = E * max(n - 1, 1)
    act_src = np.empty(cap, dtype=np.int64)
    act_val = np.empty(cap, dtype=float)
    col_src = np.empty(cap, dtype=np.int64)
    apos, cpos = _kernels.run_dynamics(
        n,
        ev_ex,
        group_start,
        np.ascontiguousarray(weights),
        r_c,
        drive,
        present,
        replay_mode,
        ret,
        coup,
        nstar,
        act_off,
        act_src,
        act_val,
        col_off,
        col_src,
    )
    return ret, coup, nstar, act_off, act_src[:apos].copy(), act_val[:apos].copy(), col_off, col_src[:cpos].copy(), None


def _assemble_outcomes(
    calendar: EventCalendar,
    weights: CouplingWeights,
    arrays,
    drive: np.ndarray,
    present: np.ndarray,
    replay_mode: bool,
) -> list[EventOutcome]:
    ret, coup, _, act_off, act_src, act_val, col_off, col_src, _ = arrays
    if not np.all(np.isfinite(ret[present.astype(bool)])):
        raise NumericalError("run produced a non-finite return")
    w = weights.product
    src_list = act_src.tolist()
    val_list = act_val.tolist()
    col_list = col_src.tolist()
    ret_list = ret.tolist()
    coup_list = coup.tolist()
    drive_list = drive.tolist()
    outcomes: list[EventOutcome] = []
    for idx, ev in enumerate(calendar.iter_events()):
        if not present[idx]:
            continue
        a0, a1 = act_off[idx], act_off[idx + 1]
        c0, c1 = col_off[idx], col_off[idx + 1]
        i = ev.exchange_id
        sources = tuple(src_list[a0:a1])
        r = ret_list[idx]
        c = coup_list[idx]
        outcomes.append(
            EventOutcome(
                event=ev,
                ret=r,
                noise=r - c if replay_mode else drive_list[idx],
                coupling_term=c,
                active_sources=sources,
                active_stress=tuple(val_list[a0:a1]),
                active_weight=tuple(w[i, j] for j in sources),
                reset_set=tuple((i, j) for j in sources)
                + tuple((k, i) for k in col_list[c0:c1]),
            )
        )
    return outcomes


def _warmup_event_count(calendar: EventCalendar, warmup_days: int, present: np.ndarray) -> int:
    count = 0
    for idx, ev in enumerate(calendar.iter_events()):
        if ev.day < warmup_days and present[idx]:
            count += 1
    return count


def simulate(
    calendar: EventCalendar,
    params: ModelParams,
    *,
    warmup_days: int = DEFAULT_WARMUP_DAYS,
    noise: np.ndarray | None = None,
    use_kernel: bool = True,
    capture_tensors: bool = False,
) -> SimulationResult:
    """Generate a full run: seeded Gaussian news drives the stress dynamics.

    The returned stream includes the warm-up prefix; ``warmup_events`` marks
    how many leading outcomes downstream statistics must discard. Pass a
    ``noise`` array (one draw per calendar event, in calendar order) to
    override the seeded draws, e.g. for symmetry experiments.
    """
    n = calendar.n_exchanges
    weights = CouplingWeights.build(calendar.exchanges, params)
    ev_ex, group_start = calendar_arrays(calendar)
    if noise is None:
        noise = draw_noise(calendar, params)
    else:
        noise = np.asarray(noise, dtype=float)
        if len(noise) != len(ev_ex):
            raise InputError(f"noise length {len(noise)} != event count {len(ev_ex)}")
    if not np.all(np.isfinite(noise)):
        raise InputError("noise draws must be finite")
    present = np.ones(len(ev_ex), dtype=np.uint8)

    if capture_tensors or not use_kernel:
        arrays = _run_python(
            n, ev_ex, group_start, weights.product, params.threshold, noise, present,
            replay_mode=False, capture_tensors=capture_tensors,
        )
    else:
        arrays = _run_kernel(
            n, ev_ex, group_start, weights.product, params.threshold, noise, present,
            replay_mode=False,
        )
    outcomes = _assemble_outcomes(
        calendar, weights, arrays, noise, present, replay_mode=False
    )
    return SimulationResult(
        outcomes=outcomes,
        prices=PriceSeries.from_outcomes(outcomes, n),
        noise=noise,
        warmup_events=_warmup_event_count(calendar, warmup_days, present),
        params=params,
        calendar=calendar,
        tensors=arrays[-1],
    )


def replay(
    calendar: EventCalendar,
    observed_returns: np.ndarray,
    params: ModelParams,
    *,
    present: np.ndarray | None = None,
    warmup_days: int = 0,
    use_kernel: bool = True,
    capture_tensors: bool = False,
) -> ReplayResult:
    """Drive the tensor with observed returns and recover the residual news.

    ``observed_returns`` holds one value per calendar event; ``present``
    (optional boolean mask of the same length) marks events that actually
    happened — absent events are skipped entirely and stress persists
    across the gap. At each present event the residual is the observed
    return minus the coupling term implied by the current tensor.
    """
    n = calendar.n_exchanges
    ev_ex, group_start = calendar_arrays(calendar)
    observed = np.asarray(observed_returns, dtype=float)
    if len(observed) != len(ev_ex):
        raise InputError(
            f"observed returns length {len(observed)} != calendar event count {len(ev_ex)}"
        )
    if present is None:
        present_arr = np.ones(len(ev_ex), dtype=np.uint8)
    else:
        present_arr = np.asarray(present).astype(np.uint8)
        if len(present_arr) != len(ev_ex):
            raise InputError("present mask length mismatch")
    if not np.all(np.isfinite(observed[present_arr.astype(bool)])):
        raise InputError("observed returns must be finite at present events")

    weights = CouplingWeights.build(calendar.exchanges, params)
    if capture_tensors or not use_kernel:
        arrays = _run_python(
            n, ev_ex, group_start, weights.product, params.threshold, observed,
            present_arr, replay_mode=True, capture_tensors=capture_tensors,
        )
    else:
        arrays = _run_kernel(
            n, ev_ex, group_start, weights.product, params.threshold, observed,
            present_arr, replay_mode=True,
        )
    outcomes = _assemble_outcomes(
        calendar, weights, arrays, observed, present_arr, replay_mode=True
    )
    residuals = np.array([o.noise for o in outcomes])
    return ReplayResult(
        outcomes=outcomes,
        residuals=residuals,
        warmup_events=_warmup_event_count(calendar, warmup_days, present_arr),
        params=params,
        calendar=calendar,
        tensors=arrays[-1],
    )


# ---------------------------------------------------------------------------
# Outcome stream serialization (line-delimited JSON).
# ---------------------------------------------------------------------------


def write_outcomes(
    path: str | Path,
    outcomes: Sequence[EventOutcome],
    *,
    n_exchanges: int,
    threshold: float,
    warmup_events: int = 0,
    mode: str = "simulate",
    names: Sequence[str] | None = None,
) -> None:
    with Path(path).open("w") as fh:
        meta = {
            "meta": {
                "n_exchanges": n_exchanges,
                "threshold": threshold,
                "warmup_events": warmup_events,
                "mode": mode,
                "names": list(names) if names is not None else None,
            }
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for o in outcomes:
            rec = {
                "exchange": o.event.exchange_id,
                "kind": o.event.kind.value,
                "day": o.event.day,
                "slot": o.event.slot,
                "utc_hour": o.event.utc_hour,
                "ret": o.ret,
                "noise": o.noise,
                "coupling": o.coupling_term,
                "active": [
                    [j, s, w]
                    for j, s, w in zip(o.active_sources, o.active_stress, o.active_weight)
                ],
                "resets": [list(rc) for rc in o.reset_set],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_outcomes(path: str | Path) -> tuple[dict, list[EventOutcome]]:
    with Path(path).open() as fh:
        meta = json.loads(fh.readline())["meta"]
        outcomes = []
        for line in fh:
            rec = json.loads(line)
            outcomes.append(
                EventOutcome(
                    event=MarketEvent(
                        exchange_id=rec["exchange"],
                        kind=EventKind(rec["kind"]),
                        day=rec["day"],
                        slot=rec["slot"],
                        utc_hour=rec["utc_hour"],
                    ),
                    ret=rec["ret"],
                    noise=rec["noise"],
                    coupling_term=rec["coupling"],
                    active_sources=tuple(a[0] for a in rec["active"]),
                    active_stress=tuple(a[1] for a in rec["active"]),
                    active_weight=tuple(a[2] for a in rec["active"]),
                    reset_set=tuple((r[0], r[1]) for r in rec["resets"]),
                )
            )
    return meta, outcomes
