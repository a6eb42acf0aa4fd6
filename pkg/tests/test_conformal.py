import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecpmpc.conformal import (
    AcpLedger,
    CalibrationWindow,
    ConsistencyError,
    ObstacleAcpState,
    WarmupError,
    egocentric_radii,
    egocentric_radius,
    egocentric_score,
    egocentric_scores,
    empirical_quantile,
    obstacle_centric_radius,
    obstacle_centric_score,
    quantile_rank,
    row_quantiles,
)
from ecpmpc.geometry import INF, ObstacleSet
from ecpmpc.oracles import brute_egocentric_score, brute_quantile, brute_radius
from ecpmpc.predictor import PredictionSheet
from ecpmpc import selftest


def S(*xy, ids=None):
    return ObstacleSet(ids or [str(k) for k in range(len(xy))], xy)


E = ObstacleSet.empty()


@pytest.mark.parametrize(
    "pred, real, expected",
    [
        (S((3, 0)), S((1, 0)), 2.0),
        (S((3, 0)), S((5, 0)), 0.0),
        (S((3, 0), (10, 10)), S((3, 0), (1, 1)), 3 - math.sqrt(2)),
        (E, E, 0.0),
        (E, S((1, 1)), INF),
        (S((1, 1)), E, 0.0),
    ],
)
def test_egocentric_score_examples(pred, real, expected):
    assert egocentric_score((0, 0), pred, real) == pytest.approx(expected, abs=1e-12)


def test_obstacle_centric_score_examples():
    a = ObstacleSet.from_mapping({"a": (0, 0), "b": (5, 5)})
    assert obstacle_centric_score(a, a) == 0.0
    real = ObstacleSet.from_mapping({"a": (1, 0), "b": (5, 8)})
    assert obstacle_centric_score(a, real) == 3.0
    assert obstacle_centric_score(S((0, 0), ids=["a"]), S((9, 9), ids=["b"])) == 0.0


@pytest.mark.parametrize(
    "scores, q, expected",
    [([1, 2, 3, 4], 0.5, 2), ([1, 2, 3, 4], 1.1, INF), ([5], 1.0, 5), ([0, 0, 1, 2], 0.75, 1),
     ([1, 2, 3], 0.0, -INF), ([3, 1, 2], 1.0, 3)],
)
def test_quantile_examples(scores, q, expected):
    assert empirical_quantile(scores, q) == expected


def test_quantile_of_empty_multiset_is_an_error():
    with pytest.raises(ValueError):
        empirical_quantile([], 0.5)


def test_quantile_rank_respects_float_threshold():
    # 0.9 * 30 evaluates to 27.000000000000004; the 27th order statistic still meets F >= 0.9
    assert quantile_rank(30, 0.9) == 27
    assert quantile_rank(30, 1 - 0.1) == 27


@given(st.lists(st.integers(0, 6).map(float), min_size=1, max_size=40), st.floats(-0.2, 1.2))
def test_quantile_matches_brute_force(scores, q):
    assert empirical_quantile(scores, q) == brute_quantile(scores, q)
    row = row_quantiles(np.array([scores]), np.array([q]))[0]
    assert row == brute_quantile(scores, q)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), max_size=6),
       st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), max_size=6),
       st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_score_matches_oracle(pred, real, x):
    P = S(*pred) if pred else E
    R = S(*real) if real else E
    assert egocentric_score(x, P, R) == pytest.approx(brute_egocentric_score(x, P, R), abs=1e-12)


def test_score_dominance_on_random_instances():
    ok, detail = selftest.check_score_dominance(np.random.default_rng(0), 1000)
    assert ok, detail


def window_with(pairs, horizon=1):
    """A window whose horizon-``horizon`` slot holds exactly ``pairs``."""
    w = CalibrationWindow(len(pairs), horizon)
    for t, (pred, real) in enumerate(pairs):
        steps = [E] * (horizon - 1) + [pred]
        w.add_sheet(PredictionSheet(steps, 10 * t))
        w.observe(10 * t + horizon, real)
    return w


def test_radius_zero_when_predictions_exact():
    a = S((1, 2), (3, 4))
    w = window_with([(a, a)] * 5)
    for alpha in (0.05, 0.5, 0.95):
        assert egocentric_radius((0, 0), 1, w, alpha) == 0.0
        assert obstacle_centric_radius(1, w, alpha) == 0.0
    assert egocentric_radius((0, 0), 1, w, 0.0) == INF
    assert obstacle_centric_radius(1, w, -0.2) == INF


def test_radius_examples_from_scores():
    # scores at the origin: 0, 0, 1, 2
    pairs = [(S((3, 0)), S((3, 0))), (S((3, 0)), S((4, 0))), (S((3, 0)), S((2, 0))), (S((3, 0)), S((1, 0)))]
    w = window_with(pairs)
    assert egocentric_radius((0, 0), 1, w, 0.25) == 1.0
    ids = ["a"]
    obs = [(S((0, 0), ids=ids), S((d, 0), ids=ids)) for d in (1, 1, 2, 4)]
    assert obstacle_centric_radius(1, window_with(obs), 0.5) == 1.0


def test_vectorised_radii_agree():
    rng = np.random.default_rng(5)
    w = selftest.random_window(rng)
    cands = rng.uniform(-6, 6, size=(40, 2))
    alphas = rng.uniform(-0.1, 1.1, size=40)
    for i in (1, 6, 12):
        scores = egocentric_scores(cands, w, i)
        got = egocentric_radii(cands, w, i, alphas)
        for k in range(40):
            pairs = w.pairs(i)
            ref = [brute_egocentric_score(cands[k], p, r) for p, r in pairs]
            assert scores[k].tolist() == pytest.approx(ref, abs=1e-12)
            assert got[k] == brute_radius(scores[k].tolist(), alphas[k])


def test_warmup_error_before_data():
    w = CalibrationWindow(30, 12)
    w.observe(0, S((0, 0)))
    with pytest.raises(WarmupError):
        egocentric_radius((0, 0), 3, w, 0.1)
    with pytest.raises(WarmupError):
        obstacle_centric_radius(3, w, 0.1)


def test_window_keeps_capacity_and_order():
    w = CalibrationWindow(3, 2)
    for t in range(6):
        w.add_sheet(PredictionSheet([S((t, 0)), S((t, 1))], t))
        w.observe(t + 1, S((t, 0)))
    assert len(w) == 3 and [r.frame for r in w.records] == [4, 5, 6]
    assert len(w.pairs(2)) == 3
    with pytest.raises(ConsistencyError):
        w.observe(6, E)


def test_aci_update_examples():
    ledger = AcpLedger(0.1, 0.05, 12, initial_alpha=0.10)
    ledger.stage_pending((0,), 1, (0, 0), 3.0, 0.0, frame=0)
    (ev,) = ledger.record_frame(S((3, 0)), 1)
    assert ev.covered and ev.alpha_after == pytest.approx(0.105)

    ledger = AcpLedger(0.1, 0.05, 12, initial_alpha=0.10)
    ledger.stage_pending((0,), 1, (0, 0), 3.0, 0.0, frame=0)
    (ev,) = ledger.record_frame(S((1, 0)), 1)
    assert not ev.covered and ev.alpha_after == pytest.approx(0.055)

    ledger = AcpLedger(0.1, 0.05, 12, initial_alpha=0.10)
    ledger.stage_pending((0,), 1, (0, 0), 3.0, INF, frame=0)
    (ev,) = ledger.record_frame(S((0, 0)), 1)
    assert ev.covered and ev.alpha_after == pytest.approx(0.105)


def test_staging_bookkeeping():
    ledger = AcpLedger(0.1, 0.03, 12)
    for i in range(1, 13):
        ledger.stage_pending((0,), i, (0, 0), 1.0, 0.0, frame=0)
    assert ledger.pending_count() == 12
    with pytest.raises(ConsistencyError):
        ledger.stage_pending((0,), 1, (0, 0), 1.0, 0.0, frame=0)
    with pytest.raises(ValueError):
        ledger.stage_pending((0,), 13, (0, 0), 1.0, 0.0, frame=0)
    for f in range(1, 13):
        ledger.record_frame(S((1, 0)), f)
    assert ledger.pending_count() == 0 and ledger.pending_depth() == 0


def test_batch_updates_every_prefix_but_reports_flagged_ones():
    ledger = AcpLedger(0.1, 0.05, 12)
    prefixes = [(0,), (1,), (2,)]
    ledger.stage_batch(prefixes, 1, [(0, 0), (10, 0), (20, 0)], [5.0, 5.0, 5.0], [0.0, 0.0, 9.0], 0,
                       reported=[True, False, False])
    events = ledger.record_frame(S((1, 0), (11, 0), (21, 0)), 1)
    assert [(e.prefix, e.covered) for e in events] == [((0,), False)]
    assert ledger.alpha((1,), 1) == pytest.approx(0.055)
    assert ledger.alpha((2,), 1) == pytest.approx(0.105)


def test_batch_and_single_checks_agree():
    rng = np.random.default_rng(2)
    a, b = AcpLedger(0.1, 0.03, 12), AcpLedger(0.1, 0.03, 12)
    for t in range(200):
        pos = rng.uniform(-3, 3, size=(4, 2))
        d = rng.uniform(0, 3, size=4)
        r = rng.uniform(0, 1, size=4)
        pre = [(k,) for k in range(4)]
        a.stage_batch(pre, 2, pos, d, r, t)
        for k in range(4):
            b.stage_pending(pre[k], 2, pos[k], d[k], r[k], t)
        real = selftest.random_set(rng, 3, spread=3)
        assert a.record_frame(real, t + 1) == b.record_frame(real, t + 1)
    assert a.alphas == b.alphas


def test_obstacle_state_update():
    st_ = ObstacleAcpState(0.1, 0.05, 12)
    pred = S((0, 0), ids=["a"])
    st_.stage_pending(2, pred, 0.5, frame=0)
    assert st_.record_frame(S((0, 1), ids=["a"]), 1) == []
    (ev,) = st_.record_frame(S((0, 1), ids=["a"]), 2)
    assert not ev.covered and st_.alpha(2) == pytest.approx(0.055)


def test_alpha_stays_within_bound_under_adversary():
    report = selftest.adversarial_alpha_run(8000, phase=1000, seed=1)
    for i, (lo, hi, blo, bhi) in report.items():
        assert blo <= lo and hi <= bhi, (i, lo, hi)
        assert lo < 0 and hi > 1  # the adversary actually reaches both sides


def test_invalid_ledger_parameters():
    with pytest.raises(ValueError):
        AcpLedger(0.1, 0.0, 12)
    with pytest.raises(ValueError):
        AcpLedger(1.0, 0.03, 12)
