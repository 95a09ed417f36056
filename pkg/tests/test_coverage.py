from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from mobigg.core import InvalidInput, SimConfig, Trajectory
from mobigg.coverage import (
    SetKind,
    box_counting,
    build_target,
    cantor_intervals,
    capacity_constant,
    coupled_cover_steps,
    cover_time_levels,
    coverage_config,
    coverage_scaling_study,
    estimate_cover_time,
    packing_number,
    rate_function,
)
from mobigg.detection import detection_config, detection_steps


def _max_gap(target, samples):
    dist, _ = cKDTree(target.points).query(samples)
    return dist.max()


@settings(max_examples=25, deadline=None)
@given(R=st.floats(0.5, 20), eps=st.floats(0.2, 1.0), d=st.integers(1, 3))
def test_cube_net_covers_the_cube(R, eps, d):
    t = build_target("Cube", R, eps, d=d, net_cap=10**6)
    assert t.epsilon <= eps + 1e-12
    x = np.random.default_rng(0).uniform(-R / 2, R / 2, (500, d))
    assert _max_gap(t, x) <= t.epsilon + 1e-9
    np.testing.assert_allclose(t.points.max(axis=0) + t.points.min(axis=0), 0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(R=st.floats(0.5, 50), eps=st.floats(0.05, 2.0))
def test_segment_net_covers_the_segment(R, eps):
    t = build_target("Segment", R, eps, d=2)
    x = np.c_[np.linspace(-R / 2, R / 2, 1001), np.zeros(1001)]
    assert _max_gap(t, x) <= t.epsilon + 1e-9 <= eps + 1e-9


@pytest.mark.parametrize("level", [0, 1, 3])
def test_cantor_net_covers_the_iterate(level):
    t = build_target("CantorIterate", 1.0, 0.01, d=1, level=level)
    left = cantor_intervals(level)
    w = 3.0**-level
    x = (left[:, None] + np.linspace(0, w, 51)[None, :]).ravel() - 0.5
    assert _max_gap(t, x[:, None]) <= t.epsilon + 1e-9
    assert len(cantor_intervals(level)) == 2**level


def test_segment_example_size():
    t = build_target("Segment", 9.0, 0.5, d=1)
    assert len(t) == 10 and t.epsilon == pytest.approx(0.5)
    assert t.dimension == 1.0


def test_target_errors():
    with pytest.raises(InvalidInput):
        build_target("Cube", 1.0, 0.0)
    with pytest.raises(InvalidInput):
        build_target("CantorIterate", 1.0, 0.1, d=3, level=2)
    with pytest.raises(InvalidInput, match="cap"):
        build_target("Cube", 100.0, 0.01, d=3)
    with pytest.raises(InvalidInput):
        build_target("Custom", points=np.empty((0, 2)))


def test_cantor_box_counting_slope():
    t = build_target("CantorIterate", 1.0, 3.0**-7 / 4, d=1, level=6)
    out = box_counting(t.points, 3.0 ** -np.arange(1, 6))
    # half-open boxes: the closed right end of each interval opens one extra box
    np.testing.assert_array_equal(out["counts"], 2 ** np.arange(2, 7))
    assert out["slope"] == pytest.approx(math.log(2) / math.log(3), rel=1e-9)


def test_box_counting_cube():
    pts = build_target("Cube", 1.0, 0.001, d=2, net_cap=10**7).points
    s = 2.0 ** -np.arange(4, 8)
    out = box_counting(pts, s)
    np.testing.assert_array_equal(out["counts"], (1 / s + 1) ** 2)
    assert out["slope"] == pytest.approx(2.0, rel=0.03)


def test_packing_number_segment():
    pts = np.linspace(0, 10, 1001)[:, None]
    # greedy disjoint 0.5-balls on [0, 10]: centres 0, 1.01, 2.02, ... -> 10 points
    assert packing_number(pts, 0.5) == 10


def test_point_cover_equals_stationary_detection():
    c = detection_config(1.0, 0.5, 2, 0.02, 2.0, seed=31)
    t = build_target("Point", d=2)
    det = detection_steps(c, [Trajectory.stationary()], 100)[:, 0, 0]
    cov = np.array([coupled_cover_steps(c, [(t, 0.5)], k)[0, 0] for k in range(100)])
    np.testing.assert_array_equal(det, cov)


def test_subset_is_covered_first_and_levels_monotone():
    big = build_target("Segment", 4.0, 0.1, d=2)
    small = build_target("Custom", epsilon=0.1, points=big.points[::3])
    c = coverage_config(big, 2.0, 1.0, 0.05, 3.0, seed=7)
    for k in range(30):
        st_ = coupled_cover_steps(c, [(big, 0.9), (small, 0.9)], k, levels=[1.0, 2.0])
        inf = np.where(st_ < 0, 10**9, st_)
        assert inf[1, 0] <= inf[0, 0] and inf[1, 1] <= inf[0, 1]
        assert inf[0, 1] <= inf[0, 0]


def test_estimate_cover_time_flags():
    t = build_target("Segment", 2.0, 0.2, d=2)
    c = coverage_config(t, 0.0, 1.0, 0.1, 1.0)
    est = estimate_cover_time(t, c, 4)
    assert est.censored == 4 and est.unreliable and math.isnan(est.mean)
    c2 = coverage_config(t, 0.5, 1.0, 0.05, 20.0, seed=2)
    est2 = estimate_cover_time(t, c2, 60)
    assert est2.censored == 0 and not est2.unreliable and est2.mean > 0
    lv = cover_time_levels(t, c2, [0.25, 0.5], 60)
    assert lv[1].mean == pytest.approx(est2.mean)
    assert lv[0].mean >= lv[1].mean


def test_cover_needs_resolution_below_r():
    t = build_target("Segment", 2.0, 1.0, d=2)
    with pytest.raises(InvalidInput):
        estimate_cover_time(t, coverage_config(t, 1.0, 1.0, 0.1, 1.0), 1)


def test_capacity_and_rates():
    assert capacity_constant(3) == pytest.approx(2 * math.pi)
    assert capacity_constant(4) == pytest.approx(2 * math.pi**2)
    with pytest.raises(InvalidInput):
        capacity_constant(2)
    R = np.array([10.0, 100.0])
    np.testing.assert_allclose(rate_function(3, 3, 1.0, 1.0, R), 3 * np.log(R) / (2 * math.pi))
    np.testing.assert_allclose(rate_function(1, 1, 2.0, 1.0, R), math.pi / 32 * np.log(R) ** 2)
    L = np.log(R)
    np.testing.assert_allclose(rate_function(2, 1, 1.0, 1.0, R), L * np.log(L) / (2 * math.pi))


def test_small_scaling_study_grows():
    base = SimConfig(0.3, 1.0, 2, 0.05, 200.0, seed=3)
    s = coverage_scaling_study("Segment", [2, 4, 8, 16], base, 20, epsilon=0.5, compare_kind="Point")
    means = [e.mean for e in s.estimates]
    assert means == sorted(means)
    assert s.ratio > 1 and s.compare_kind == SetKind.POINT.value
    assert len(s.rows()) == 4
    with pytest.raises(InvalidInput):
        coverage_scaling_study("Segment", [1, 2, 3, 5], base, 2, epsilon=0.5)
