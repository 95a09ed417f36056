from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobigg.broadcast import BroadcastState, broadcast_scaling_study, broadcast_trial, simulate_broadcast
from mobigg.core import InvalidInput


@settings(max_examples=60, deadline=None)
@given(
    labels=st.lists(st.integers(0, 6), min_size=1, max_size=30),
    seed=st.integers(0, 2**16),
)
def test_exchange_is_monotone_and_closed(labels, seed):
    labels = np.array(labels)
    rng = np.random.default_rng(seed)
    informed = rng.random(len(labels)) < 0.3
    informed[0] = True
    state = BroadcastState(informed.copy(), 0, 0)
    state.exchange(labels)
    assert np.all(state.informed[informed])  # never un-informs
    for c in np.unique(labels):
        members = state.informed[labels == c]
        assert members.all() or not members.any()  # whole components only
    assert np.array_equal(state.informed, np.isin(labels, labels[informed]))


def test_single_node_broadcast_is_immediate():
    b = broadcast_trial(0.05, 1.0, 1.0, 2, seed=1)
    assert b.nodes >= 1 and b.resampled > 0
    if b.nodes == 1:
        assert b.steps == 0


def test_connected_start_gives_zero():
    # 50 nodes on a 1.6 x 1.6 torus with r = 1: always one component
    b = broadcast_trial(50, 50 / 2.56, 1.0, 2, seed=2)
    assert b.steps == 0


def test_subcritical_is_refused(lambda_c_2d):
    with pytest.warns(RuntimeWarning):
        with pytest.raises(InvalidInput, match="supercritical"):
            simulate_broadcast(500, 0.5 * lambda_c_2d.median, 1.0, 2, 5)
    with pytest.warns(RuntimeWarning):
        with pytest.raises(InvalidInput):
            broadcast_scaling_study([500, 2000, 8000], 1.0, 1.0, 2, 5, lambda_c=lambda_c_2d.median)


def test_study_input_checks():
    with pytest.raises(InvalidInput):
        broadcast_scaling_study([500, 2000], 5.0, 1.0, 2, 5, lambda_c=1.5)
    with pytest.raises(InvalidInput):
        broadcast_scaling_study([500, 2000, 3000], 5.0, 1.0, 2, 5, lambda_c=1.5)


def test_thread_independence():
    a = simulate_broadcast(400, 3.0, 1.0, 2, 12, seed=4, lambda_c=1.5, threads=1)
    b = simulate_broadcast(400, 3.0, 1.0, 2, 12, seed=4, lambda_c=1.5, threads=3)
    np.testing.assert_array_equal(a.times, b.times)


def test_dense_limit_median_at_most_two(lambda_c_2d):
    lam = 10 * lambda_c_2d.median
    for n in (500, 2000, 8000):
        res = simulate_broadcast(n, lam, 1.0, 2, 30, seed=6, lambda_c=lambda_c_2d.median)
        assert res.all_finished and res.median <= 2


def test_median_non_increasing_in_lambda(lambda_c_2d):
    lc = lambda_c_2d.median
    res = [simulate_broadcast(2000, f * lc, 1.0, 2, 100, seed=7, lambda_c=lc) for f in (1.5, 2.0, 3.0)]
    assert all(r.all_finished for r in res)
    for a, b in zip(res, res[1:]):
        se = math.hypot(a.median_se(), b.median_se())
        assert b.median <= a.median + 3 * se


def test_sublinear_growth_and_giant_overlap(lambda_c_2d):
    lc = lambda_c_2d.median
    study = broadcast_scaling_study([500, 2000, 8000], 1.5 * lc, 1.0, 2, 60, seed=5, lambda_c=lc)
    assert study.passed, study.sublinear
    assert len(study.sublinear) == 2
    assert all(r.all_finished for r in study.results)
    pairs = sum(r.giant_pairs for r in study.results)
    overlaps = sum(r.giant_overlap_rate * r.giant_pairs for r in study.results)
    assert pairs > 50 and overlaps / pairs >= 0.99
    assert {"n", "median", "median_se", "unfinished"} <= set(study.rows()[0])


def test_unfinished_trials_are_reported():
    res = simulate_broadcast(4000, 1.6, 1.0, 2, 3, seed=1, lambda_c=1.5, max_steps=0)
    assert res.unfinished + len(res.times) == 3
    assert res.unfinished > 0 and not res.all_finished
