"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Shared long runs are session-scoped. Criterion configurations are pinned
here: the reference parameter quartet (threshold 0.03, zone scale 20.0,
cap scale 0.8, noise variance 0.0006) everywhere it is required, the
shipped 24-exchange registry for the world-scale runs, and documented
synthetic registries where a criterion leaves the network free.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from pricequake.calibrate import SearchSpace, fit
from pricequake.detector import QuakeKind, Sign, detect_quakes
from pricequake.engine import replay, simulate
from pricequake.network import ExchangeSpec, build_calendar, load_exchanges
from pricequake.ofc import OfcLattice, run_ofc
from pricequake.reporting import degree_stats, distribution

from .conftest import SAMPLE_CONFIG, reference_params
from .scenarios import (
    EIGHT_MEMBER_MEMBERS,
    EIGHT_MEMBER_SOURCES,
    ELEVEN_MEMBER_EXCLUDED,
    ELEVEN_MEMBER_MEMBERS,
    ELEVEN_MEMBER_SOURCES,
    eight_member_positive_trace,
    eleven_member_negative_trace,
)
from .test_detector import assert_oracle_agreement, random_micro_scenario

NOISE_VAR = 0.0006


def verdict(number: int, name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {number} {name}: {status}{suffix}")
    return ok


def spread_registry(n: int) -> list[ExchangeSpec]:
    """Equal-cap synthetic registry with time zones spread over the day."""
    exchanges = []
    for k in range(n):
        z = -11.0 + 23.0 * k / (n - 1)
        exchanges.append(
            ExchangeSpec(
                id=k,
                name=f"S{k:02d}",
                capitalization=1.0,
                time_zone=z,
                open_hour=(9.0 - z) % 24.0,
                close_hour=(15.0 - z) % 24.0,
            )
        )
    return exchanges


@pytest.fixture(scope="module")
def world_calendar_10y():
    exchanges = load_exchanges(SAMPLE_CONFIG / "exchanges.csv")
    return build_calendar(exchanges, 3650)


@pytest.fixture(scope="module")
def big_sim(world_calendar_10y):
    # Warm the JIT outside the timed sections.
    warm = build_calendar(world_calendar_10y.exchanges, 2)
    simulate(warm, reference_params(seed=0), warmup_days=0)
    t0 = time.perf_counter()
    result = simulate(world_calendar_10y, reference_params(seed=424242), warmup_days=250)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="module")
def big_replay(world_calendar_10y, big_sim):
    sim, _ = big_sim
    t0 = time.perf_counter()
    rep = replay(world_calendar_10y, sim.returns(), sim.params)
    return rep, time.perf_counter() - t0


def test_criterion_01_engine_identity(big_sim):
    sim, elapsed = big_sim
    assert len(sim.outcomes) >= 100_000
    worst = max(
        abs(o.ret - o.coupling_term - o.noise) / max(1.0, abs(o.ret))
        for o in sim.outcomes
    )
    ok = worst <= 1e-12 and elapsed <= 60.0
    assert verdict(
        1,
        "engine identity",
        ok,
        f"{len(sim.outcomes)} events, worst relative error {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_02_replay_round_trip(big_sim, big_replay):
    sim, _ = big_sim
    rep, elapsed = big_replay
    assert len(rep.residuals) == len(sim.noise)
    worst = float(np.max(np.abs(rep.residuals - sim.noise)))
    ok = worst <= 1e-12 and elapsed <= 120.0
    assert verdict(
        2,
        "replay round trip",
        ok,
        f"worst residual-noise gap {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_03_detector_oracle():
    mismatches = 0
    checked = 0
    for seed in range(500):
        res, params = random_micro_scenario(seed)
        for kind in (QuakeKind.SIPQ, QuakeKind.CIPQ):
            checked += 1
            try:
                assert_oracle_agreement(res, params, kind)
            except AssertionError:
                mismatches += 1
    ok = mismatches == 0
    assert verdict(
        3,
        "detector brute-force oracle",
        ok,
        f"{checked} scenario checks, {mismatches} mismatches",
    )


def test_criterion_04_worked_figure_traces():
    params = reference_params()
    pos_records, _, _ = detect_quakes(
        eight_member_positive_trace(), params, QuakeKind.SIPQ
    )
    neg_records, _, _ = detect_quakes(
        eleven_member_negative_trace(), params, QuakeKind.CIPQ
    )
    ok = (
        len(pos_records) == 1
        and pos_records[0].sign is Sign.POSITIVE
        and pos_records[0].members == frozenset(EIGHT_MEMBER_MEMBERS)
        and pos_records[0].sources_without_influence == frozenset(EIGHT_MEMBER_SOURCES)
        and len(neg_records) == 1
        and neg_records[0].sign is Sign.NEGATIVE
        and neg_records[0].members == frozenset(ELEVEN_MEMBER_MEMBERS)
        and neg_records[0].sources_without_influence == frozenset(ELEVEN_MEMBER_SOURCES)
        and ELEVEN_MEMBER_EXCLUDED not in neg_records[0].members
    )
    assert verdict(
        4,
        "worked figure traces",
        ok,
        "8-member positive quake with sources {6,22}; 11-member negative quake "
        "with four uninfluenced sources and one excluded critical node",
    )


@pytest.fixture(scope="module")
def world_quakes(big_sim):
    sim, _ = big_sim
    records, edges, marks = detect_quakes(sim.post_warmup, sim.params, QuakeKind.SIPQ)
    return records, edges, marks


def test_criterion_05_degree_balance(world_quakes):
    records, _, _ = world_quakes
    table = degree_stats(records, n_exchanges=24)
    deltas = table.network_delta
    ok = bool(np.all(deltas == 0.0)) and len(records) > 0
    assert verdict(
        5,
        "degree balance",
        ok,
        f"{len(records)} quakes, network mean in-out deltas {deltas.tolist()}",
    )


SIGN_SYMMETRY_SEEDS = range(3, 13)


def test_criterion_06_sign_symmetry():
    # The criterion fixes symmetric noise but leaves the network free; a
    # five-exchange equal-capitalization registry with maximally spread
    # time zones keeps quakes plentiful while sparse. The binomial test is
    # applied to the positive/negative counts pooled over the ten runs:
    # within one run quake signs are mildly autocorrelated (consecutive
    # cascades share tensor state), which overdisperses per-run counts
    # without breaking the exact sign symmetry of the dynamics.
    exchanges = spread_registry(5)
    cal = build_calendar(exchanges, 3900)
    rows = []
    total = positive = 0
    enough = True
    for seed in SIGN_SYMMETRY_SEEDS:
        params = reference_params(seed=seed)
        sim = simulate(cal, params, warmup_days=100)
        records, _, _ = detect_quakes(sim.post_warmup, params, QuakeKind.SIPQ)
        n = len(records)
        pos = sum(1 for r in records if r.sign is Sign.POSITIVE)
        rows.append((seed, n, pos))
        total += n
        positive += pos
        enough = enough and n >= 2000
    pvalue = stats.binomtest(positive, total, 0.5).pvalue
    ok = enough and pvalue >= 0.01
    detail = (
        f"{total} quakes over 10 runs, {positive} positive, pooled p={pvalue:.3f}; "
        + "; ".join(f"seed {s}: {pos}/{n}" for s, n, pos in rows)
    )
    assert verdict(6, "sign symmetry", ok, detail)


def test_criterion_07_distribution_shape(world_quakes):
    # Run exactly as stated at the reference parameters on the shipped
    # 24-exchange registry. The decreasing-shape clause is expected to fail:
    # at noise sd 0.0245 against threshold 0.03 the stress field crosses the
    # gate within one or two events, the cascade branching factor exceeds
    # one for any Earth-plausible registry, and quake sizes pile up at the
    # full network instead of decaying. See notes in the decisions ledger.
    records, _, _ = world_quakes
    rows = distribution(records, "size")
    probs = {lo: p for lo, _, p in rows}
    mass_ge_8 = sum(p for lo, _, p in rows if lo >= 8.0)
    head = [probs.get(2.0 ** k, 0.0) for k in range(1, 5)]  # [2,4),[4,8),[8,16),[16,32)
    decreasing = all(head[i] > head[i + 1] > 0 or head[i + 1] == 0 for i in range(3))
    strictly = head[0] > head[1] > head[2] > head[3] > 0 or (
        head[0] > head[1] > head[2] > 0 and head[3] == 0.0
    )
    ok = mass_ge_8 > 0 and strictly and decreasing
    assert verdict(
        7,
        "distribution shape",
        ok,
        f"mass at size>=8: {mass_ge_8:.3f}; octave pdf [2,4):{head[0]:.3f} "
        f"[4,8):{head[1]:.3f} [8,16):{head[2]:.3f} [16,32):{head[3]:.3f}",
    )


def test_supplementary_subcritical_shape():
    # Companion demonstration (not a numbered criterion): with the same
    # parameter quartet on a sparse eight-exchange registry the cascade
    # mechanism does produce a heavy-tailed, decaying size distribution.
    exchanges = spread_registry(8)
    cal = build_calendar(exchanges, 2500)
    params = reference_params(seed=2)
    sim = simulate(cal, params, warmup_days=100)
    records, _, _ = detect_quakes(sim.post_warmup, params, QuakeKind.SIPQ)
    sizes = np.array([len(r.members) for r in records])
    counts, _ = np.histogram(sizes, bins=2.0 ** np.arange(0, 5))
    pdf = counts / counts.sum()
    print(
        f"\nSUPPLEMENTARY subcritical regime: {len(records)} quakes, "
        f"octave pdf {np.round(pdf, 3).tolist()}, mass at size>=8 {(sizes >= 8).mean():.3f}"
    )
    assert len(records) > 1000
    assert (sizes >= 8).sum() > 0
    assert pdf[1] > pdf[3] > 0  # head dominates the truncation bin


CALIBRATION_SEEDS = range(101, 111)


def test_criterion_08_calibration_recovery():
    exchanges = load_exchanges(SAMPLE_CONFIG / "exchanges.csv")
    cal = build_calendar(exchanges, 5 * 365)
    space = SearchSpace(points_per_axis=12, refine_rounds=2)
    t0 = time.perf_counter()
    hits = 0
    rows = []
    for seed in CALIBRATION_SEEDS:
        true = reference_params(seed=seed)
        sim = simulate(cal, true, warmup_days=250)
        result = fit(sim.returns(), cal, space)
        fitted = result.params
        r_err = abs(fitted.threshold / true.threshold - 1.0)
        s_err = abs(fitted.noise_sd**2 / NOISE_VAR - 1.0)
        good = r_err <= 0.20 and s_err <= 0.10
        hits += good
        rows.append(f"seed {seed}: threshold err {r_err:.1%}, variance err {s_err:.1%}")
    elapsed = time.perf_counter() - t0
    ok = hits >= 8 and elapsed <= 1800.0
    assert verdict(
        8,
        "calibration recovery",
        ok,
        f"{hits}/10 trials within tolerance in {elapsed:.0f}s; " + "; ".join(rows),
    )


def test_criterion_09_residual_gaussianity(big_sim, big_replay):
    sim, _ = big_sim
    rep, _ = big_replay
    resid = rep.residuals[sim.warmup_events:]
    e = len(resid)
    mean = float(np.mean(resid))
    var = float(np.var(resid))
    se = math.sqrt(NOISE_VAR / e)
    ok = abs(mean) <= 3 * se and abs(var / NOISE_VAR - 1.0) <= 0.05
    assert verdict(
        9,
        "residual gaussianity",
        ok,
        f"mean {mean:.2e} (3se {3*se:.2e}), variance {var:.2e} vs {NOISE_VAR:.2e}",
    )


def test_criterion_10_ofc_reference():
    lattice = OfcLattice.random(side=50, transfer=0.2, seed=7)
    t0 = time.perf_counter()
    sizes = run_ofc(lattice, 100_000)  # warm-up 10 * 50^2 handled internally
    elapsed = time.perf_counter() - t0
    decades = math.log10(max(sizes) / min(sizes))
    ok = elapsed <= 300.0 and decades >= 2.0 and len(sizes) == 100_000
    assert verdict(
        10,
        "spring-block lattice reference",
        ok,
        f"{len(sizes)} avalanches in {elapsed:.0f}s, sizes {min(sizes)}..{max(sizes)} "
        f"({decades:.2f} decades)",
    )
