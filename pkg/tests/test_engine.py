import math

import numpy as np
import pytest

from pricequake.engine import (
    CouplingWeights,
    InputError,
    ModelParams,
    StressTensor,
    alpha_weight,
    beta_weight,
    draw_noise,
    evaluate_event,
    read_outcomes,
    replay,
    simulate,
    write_outcomes,
)
from pricequake.network import EventKind, MarketEvent, build_calendar

from .conftest import make_exchange, reference_params, ring_registry


def event_of(exchange_id, day=0, slot=0, hour=9.0, kind=EventKind.OPEN):
    return MarketEvent(exchange_id=exchange_id, kind=kind, day=day, slot=slot, utc_hour=hour)


# ---------------------------------------------------------------------------
# Pairwise weights: frozen scalar evaluations of the two closed forms.
# ---------------------------------------------------------------------------


def test_alpha_equal_caps():
    p = reference_params()
    a = make_exchange(0, cap=3.0)
    b = make_exchange(1, cap=3.0)
    assert math.isclose(alpha_weight(a, b, p), 1.0 - math.exp(-1.25), rel_tol=1e-15)
    assert round(alpha_weight(a, b, p), 5) == 0.71350


def test_alpha_dominant_counterpart():
    p = reference_params()
    a = make_exchange(0, cap=1.0)
    b = make_exchange(1, cap=10.0)
    assert math.isclose(alpha_weight(a, b, p), 1.0 - math.exp(-12.5), rel_tol=1e-15)
    assert alpha_weight(a, b, p) == pytest.approx(0.9999963, abs=1e-7)


def test_alpha_vanishing_counterpart():
    p = reference_params()
    a = make_exchange(0, cap=1.0)
    b = make_exchange(1, cap=1e-12)
    assert alpha_weight(a, b, p) < 1e-11


def test_alpha_monotonicity():
    p = reference_params()
    base = make_exchange(0, cap=2.0)
    caps = [0.5, 1.0, 2.0, 4.0, 8.0]
    rising = [alpha_weight(base, make_exchange(1, cap=c), p) for c in caps]
    assert rising == sorted(rising)
    falling = [alpha_weight(make_exchange(0, cap=c), make_exchange(1, cap=2.0), p) for c in caps]
    assert falling == sorted(falling, reverse=True)


@pytest.mark.parametrize(
    "gap,expected",
    [(0.0, 1.0), (6.0, math.exp(-0.3)), (14.0, math.exp(-0.7))],
)
def test_beta_values(gap, expected):
    p = reference_params()
    a = make_exchange(0, zone=0.0)
    b = make_exchange(1, zone=gap)
    assert math.isclose(beta_weight(a, b, p), expected, rel_tol=1e-15)


def test_weight_matrix_matches_scalar_ops():
    p = reference_params()
    exchanges = ring_registry(5, caps=[0.5, 1.0, 2.0, 4.0, 8.0])
    w = CouplingWeights.build(exchanges, p)
    for i in range(5):
        assert w.alpha[i, i] == 0.0 and w.beta[i, i] == 0.0
        for j in range(5):
            if i != j:
                assert w.alpha[i, j] == alpha_weight(exchanges[i], exchanges[j], p)
                assert w.beta[i, j] == beta_weight(exchanges[i], exchanges[j], p)
                assert w.product[i, j] == w.alpha[i, j] * w.beta[i, j]


# ---------------------------------------------------------------------------
# Single-event dynamics.
# ---------------------------------------------------------------------------


def unit_weights(n):
    product = np.full((n, n), 0.71350)
    np.fill_diagonal(product, 0.0)
    return CouplingWeights(alpha=product.copy(), beta=np.ones((n, n)), product=product)


def test_pure_news_event():
    p = reference_params()
    tensor = StressTensor.zeros(3)
    out, new = evaluate_event(tensor, event_of(0), 0.01, p, unit_weights(3))
    assert out.ret == 0.01
    assert out.coupling_term == 0.0
    assert out.active_set == frozenset()
    assert out.reset_set == ()
    assert new.cum[1, 0] == 0.01 and new.cum[2, 0] == 0.01
    assert new.cum[0, 1] == 0.0


def test_single_critical_counterpart():
    p = reference_params()
    cum = np.zeros((2, 2))
    cum[0, 1] = 0.04
    out, new = evaluate_event(StressTensor(cum), event_of(0), 0.0, p, unit_weights(2))
    assert out.n_star == 1
    assert out.active_set == frozenset({1})
    assert math.isclose(out.ret, 0.71350 * 0.04, rel_tol=1e-15)
    assert round(out.ret, 6) == 0.028540
    assert new.cum[0, 1] == 0.0
    assert (0, 1) in out.reset_set


def test_subthreshold_accumulation():
    p = reference_params()
    cum = np.zeros((2, 2))
    cum[0, 1] = 0.02  # below threshold: gate closed, stress keeps building
    out, new = evaluate_event(StressTensor(cum), event_of(1), 0.015, p, unit_weights(2))
    assert out.ret == 0.015
    assert out.active_set == frozenset()
    assert new.cum[0, 1] == 0.035
    assert (0, 1) not in out.reset_set


def test_threshold_equality_is_subcritical():
    p = reference_params()
    cum = np.zeros((2, 2))
    cum[0, 1] = p.threshold
    out, _ = evaluate_event(StressTensor(cum), event_of(0), 0.0, p, unit_weights(2))
    assert out.active_set == frozenset()
    assert out.ret == 0.0


def test_supercritical_push_is_discarded_first():
    p = reference_params()
    cum = np.zeros((3, 3))
    cum[2, 0] = 0.05  # stale stress toward the moving exchange
    out, new = evaluate_event(StressTensor(cum), event_of(0), 0.01, p, unit_weights(3))
    assert (2, 0) in out.reset_set
    assert new.cum[2, 0] == 0.01  # reset then pushed


def test_non_finite_news_rejected():
    p = reference_params()
    with pytest.raises(InputError):
        evaluate_event(StressTensor.zeros(2), event_of(0), math.nan, p, unit_weights(2))


def test_tensor_validation():
    bad = np.zeros((2, 2))
    bad[0, 0] = 1.0
    with pytest.raises(ValueError):
        StressTensor(bad)
    with pytest.raises(ValueError):
        StressTensor(np.full((2, 2), np.inf))


# ---------------------------------------------------------------------------
# Whole-run properties.
# ---------------------------------------------------------------------------


def small_system(n=6, days=40, seed=3):
    exchanges = ring_registry(n, caps=[1.0 + 0.3 * k for k in range(n)])
    cal = build_calendar(exchanges, days)
    params = reference_params(seed=seed)
    return cal, params


def test_return_identity_machine_precision():
    cal, params = small_system()
    res = simulate(cal, params, warmup_days=0)
    for o in res.outcomes:
        assert abs(o.ret - o.coupling_term - o.noise) <= 1e-12 * max(1.0, abs(o.ret))


def test_seed_determinism():
    cal, params = small_system()
    a = simulate(cal, params, warmup_days=0)
    b = simulate(cal, params, warmup_days=0)
    assert [o.ret for o in a.outcomes] == [o.ret for o in b.outcomes]
    assert [o.reset_set for o in a.outcomes] == [o.reset_set for o in b.outcomes]


def test_kernel_matches_python_path():
    for seed in (1, 2, 3):
        cal, params = small_system(n=5, days=25, seed=seed)
        fast = simulate(cal, params, warmup_days=0, use_kernel=True)
        slow = simulate(cal, params, warmup_days=0, use_kernel=False)
        for a, b in zip(fast.outcomes, slow.outcomes):
            assert a.ret == b.ret
            assert a.coupling_term == b.coupling_term
            assert a.active_sources == b.active_sources
            assert a.active_stress == b.active_stress
            assert a.reset_set == b.reset_set


def test_kernel_matches_single_event_chain():
    # No simultaneous hours: the batch run must equal chained single events.
    exchanges = [
        make_exchange(i, cap=1.0 + i, zone=float(i), open_hour=1.0 * i, close_hour=1.0 * i + 7)
        for i in range(4)
    ]
    cal = build_calendar(exchanges, 15)
    params = reference_params(seed=9)
    res = simulate(cal, params, warmup_days=0)
    weights = CouplingWeights.build(exchanges, params)
    tensor = StressTensor.zeros(4)
    for idx, ev in enumerate(cal.iter_events()):
        out, tensor = evaluate_event(tensor, ev, res.noise[idx], params, weights)
        got = res.outcomes[idx]
        assert out.ret == got.ret
        assert out.coupling_term == got.coupling_term
        assert out.active_sources == got.active_sources
        assert set(out.reset_set) == set(got.reset_set)


def test_simultaneous_group_snapshot_semantics():
    # Two exchanges sharing hours: within a group each reads the pre-group
    # tensor, so neither sees the other's same-slot return.
    exchanges = [make_exchange(i, open_hour=9.0, close_hour=15.0) for i in range(2)]
    cal = build_calendar(exchanges, 1)
    params = reference_params(seed=1)
    noise = np.array([0.05, -0.02, 0.0, 0.0])
    res = simulate(cal, params, warmup_days=0, noise=noise)
    opens, closes = res.outcomes[:2], res.outcomes[2:]
    assert opens[0].ret == 0.05 and opens[1].ret == -0.02
    assert all(o.active_set == frozenset() for o in opens)
    # After the open group each exchange carries the other's open return:
    # only exchange 1's stress from exchange 0 (+0.05) crossed the gate.
    assert closes[0].active_set == frozenset()
    assert closes[0].ret == 0.0
    assert closes[1].active_set == frozenset({0})
    assert closes[1].active_stress == (0.05,)
    w = closes[1].active_weight[0]
    assert closes[1].ret == w * 0.05


def test_sign_symmetry_exact():
    cal, params = small_system(n=6, days=60, seed=5)
    noise = draw_noise(cal, params)
    plus = simulate(cal, params, warmup_days=0, noise=noise, capture_tensors=True)
    minus = simulate(cal, params, warmup_days=0, noise=-noise, capture_tensors=True)
    assert np.array_equal(
        np.array([o.ret for o in plus.outcomes]),
        -np.array([o.ret for o in minus.outcomes]),
    )
    for ta, tb in zip(plus.tensors, minus.tensors):
        assert np.array_equal(ta, -tb)


def test_diagonal_stays_zero():
    cal, params = small_system(n=4, days=30, seed=2)
    res = simulate(cal, params, warmup_days=0, capture_tensors=True)
    for t in res.tensors:
        assert np.all(np.diagonal(t) == 0.0)


def test_gate_exactness_against_snapshots():
    exchanges = [
        make_exchange(i, cap=1.0, zone=2.0 * i, open_hour=(2.0 * i) % 24, close_hour=(2.0 * i + 9) % 24)
        for i in range(4)
    ]
    cal = build_calendar(exchanges, 30)
    params = reference_params(seed=8)
    res = simulate(cal, params, warmup_days=0, capture_tensors=True)
    r_c = params.threshold
    for idx, (o, t) in enumerate(zip(res.outcomes, res.tensors)):
        i = o.event.exchange_id
        expected_active = {j for j in range(4) if j != i and abs(t[i, j]) > r_c}
        assert set(o.active_sources) == expected_active
        row_resets = {(a, b) for a, b in o.reset_set if a == i}
        assert row_resets == {(i, j) for j in expected_active}
        col_resets = {(a, b) for a, b in o.reset_set if b == i}
        assert col_resets == {(k, i) for k in range(4) if k != i and abs(t[k, i]) > r_c}


def test_replay_recovers_noise():
    cal, params = small_system(n=6, days=80, seed=13)
    sim = simulate(cal, params, warmup_days=0)
    rep = replay(cal, sim.returns(), params)
    # The tensor evolution is bit-identical, so residuals match the draws
    # up to one rounding of the return sum.
    assert np.max(np.abs(rep.residuals - sim.noise)) <= 1e-12
    for a, b in zip(sim.outcomes, rep.outcomes):
        assert a.ret == b.ret
        assert a.coupling_term == b.coupling_term
        assert a.active_sources == b.active_sources


def test_replay_residual_hand_trace():
    # Prior large move of exchange 1 (0.05, above threshold), then exchange
    # 0 prices it with combined weight 0.7: residual = 0.04 - 0.7 * 0.05.
    cap_ratio = 0.8 * math.log(1.0 / 0.3)  # makes the capitalization weight 0.7
    exchanges = [
        make_exchange(0, cap=1.0, zone=0.0, open_hour=12.0, close_hour=20.0),
        make_exchange(1, cap=cap_ratio, zone=0.0, open_hour=1.0, close_hour=6.0),
    ]
    cal = build_calendar(exchanges, 1)
    params = reference_params()
    observed = np.zeros(4)
    flat = list(cal.iter_events())
    # the large move must be exchange 1's last event before the target,
    # otherwise its next move discards the stale supercritical entry
    mover = max(i for i, e in enumerate(flat) if e.exchange_id == 1 and e.utc_hour < 12.0)
    observed[mover] = 0.05
    target = next(i for i, e in enumerate(flat) if e.exchange_id == 0)
    observed[target] = 0.04
    rep = replay(cal, observed, params)
    out = rep.outcomes[target]
    assert out.active_set == frozenset({1})
    assert out.active_weight[0] == pytest.approx(0.7, rel=1e-12)
    assert out.noise == out.ret - out.coupling_term
    assert out.noise == pytest.approx(0.04 - 0.7 * 0.05, rel=1e-9)
    assert out.noise == pytest.approx(0.005, rel=1e-9)


def test_replay_skips_absent_events():
    cal, params = small_system(n=3, days=10, seed=4)
    sim = simulate(cal, params, warmup_days=0)
    present = np.ones(cal.event_count, dtype=bool)
    present[5] = False
    present[17] = False
    rep = replay(cal, sim.returns(), params, present=present)
    assert len(rep.outcomes) == cal.event_count - 2
    skipped = {5, 17}
    kept_events = [ev for i, ev in enumerate(cal.iter_events()) if i not in skipped]
    assert [o.event for o in rep.outcomes] == kept_events


def test_replay_length_mismatch():
    cal, params = small_system(n=3, days=5)
    with pytest.raises(InputError):
        replay(cal, np.zeros(3), params)


def test_replay_zero_data():
    cal, params = small_system(n=3, days=5)
    rep = replay(cal, np.zeros(cal.event_count), params)
    assert np.all(rep.residuals == 0.0)
    assert all(o.active_set == frozenset() for o in rep.outcomes)


def test_single_exchange_returns_are_noise():
    exchanges = [make_exchange(0)]
    cal = build_calendar(exchanges, 50)
    params = reference_params(seed=21)
    res = simulate(cal, params, warmup_days=0)
    assert np.array_equal(res.returns(), res.noise)
    assert all(o.coupling_term == 0.0 for o in res.outcomes)


def test_zero_noise_zero_dynamics():
    cal, params = small_system(n=4, days=20)
    res = simulate(cal, params, warmup_days=0, noise=np.zeros(cal.event_count))
    assert np.all(res.returns() == 0.0)


def test_noise_substreams_are_per_exchange():
    exchanges = [make_exchange(i, open_hour=2.0 * i, close_hour=2.0 * i + 1) for i in range(3)]
    cal_a = build_calendar(exchanges, 10)
    reordered = [
        make_exchange(0, open_hour=20.0, close_hour=22.0),
        make_exchange(1, open_hour=2.0, close_hour=3.0),
        make_exchange(2, open_hour=4.0, close_hour=5.0),
    ]
    cal_b = build_calendar(reordered, 10)
    params = reference_params(seed=31)
    na, nb = draw_noise(cal_a, params), draw_noise(cal_b, params)
    for ex in range(3):
        a = [na[i] for i, ev in enumerate(cal_a.iter_events()) if ev.exchange_id == ex]
        b = [nb[i] for i, ev in enumerate(cal_b.iter_events()) if ev.exchange_id == ex]
        assert a == b


def test_per_exchange_sigma():
    exchanges = [make_exchange(i, open_hour=3.0 * i, close_hour=3.0 * i + 2) for i in range(3)]
    cal = build_calendar(exchanges, 20)
    params = ModelParams(
        threshold=0.03,
        zone_scale=20.0,
        cap_scale=0.8,
        noise_sd=0.02,
        seed=5,
        noise_sd_by_exchange=(0.0, 0.02, 0.05),
    )
    noise = draw_noise(cal, params)
    by_ex = {ex: [] for ex in range(3)}
    for i, ev in enumerate(cal.iter_events()):
        by_ex[ev.exchange_id].append(noise[i])
    assert all(x == 0.0 for x in by_ex[0])
    assert np.std(by_ex[2]) > np.std(by_ex[1])


def test_price_series():
    cal, params = small_system(n=3, days=15, seed=6)
    res = simulate(cal, params, warmup_days=0)
    for ex, pts in res.prices.points.items():
        price = 1.0
        for pt in pts:
            price *= math.exp(pt.ret)
            assert pt.price == pytest.approx(price, rel=1e-12)
            assert pt.price > 0


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(threshold=0.0, zone_scale=1.0, cap_scale=1.0, noise_sd=0.1)
    with pytest.raises(ValueError):
        ModelParams(threshold=0.1, zone_scale=-1.0, cap_scale=1.0, noise_sd=0.1)
    with pytest.raises(ValueError):
        ModelParams(threshold=0.1, zone_scale=1.0, cap_scale=1.0, noise_sd=-0.1)


def test_warmup_marker():
    cal, params = small_system(n=3, days=10)
    res = simulate(cal, params, warmup_days=4)
    assert res.warmup_events == 4 * 6
    assert len(res.post_warmup) == 6 * 6


def test_outcome_serialization_round_trip(tmp_path):
    cal, params = small_system(n=4, days=12, seed=17)
    res = simulate(cal, params, warmup_days=2)
    path = tmp_path / "outcomes.jsonl"
    write_outcomes(
        path,
        res.outcomes,
        n_exchanges=4,
        threshold=params.threshold,
        warmup_events=res.warmup_events,
    )
    meta, loaded = read_outcomes(path)
    assert meta["n_exchanges"] == 4
    assert meta["warmup_events"] == res.warmup_events
    assert loaded == res.outcomes
