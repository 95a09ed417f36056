from __future__ import annotations

import math

import numpy as np
import pytest

from mobigg.core import DomainSpec, InvalidInput, SimConfig, Trajectory
from mobigg.coverage import build_target
from mobigg.detection import (
    compact_detection_tail,
    detection_config,
    detection_formula_crosscheck,
    detection_steps,
    detection_trials,
    excursion_bound,
    simulate_detection,
    stay_put_comparison,
    survival_by_level,
)
from mobigg.sausage import ball_volume


@pytest.mark.parametrize("d", [1, 2, 3])
def test_survival_at_zero_is_void_probability(d):
    c = detection_config(1.0, 0.8, d, 0.01, 0.01, seed=d)
    s, se = simulate_detection(c, None, 3000).at(0.0)
    expected = math.exp(-ball_volume(d, 0.8))
    assert abs(s - expected) < 3 * math.sqrt(expected * (1 - expected) / 3000)


def test_1d_survival_formula():
    c = detection_config(1.0, 0.5, 1, 1e-3, 1.0, seed=17)
    cc = detection_formula_crosscheck(c, None, 1.0, 3000, 2000)
    # exp(-(sqrt(8/pi) + 1))
    assert cc.closed_form == pytest.approx(0.07460, abs=5e-5)
    assert cc.passed, cc
    assert abs(cc.direct - cc.closed_form) < 3 * cc.direct_se + 0.003


def test_zero_intensity_never_detects():
    c = detection_config(0.0, 1.0, 2, 0.1, 1.0)
    tc = simulate_detection(c, None, 50)
    assert np.all(tc.survival == 1.0)
    assert all(t.censored for t in detection_trials(c, Trajectory.stationary(), 5))


def test_levels_are_pathwise_monotone():
    c = detection_config(2.0, 0.5, 2, 0.02, 2.0, seed=4)
    steps = detection_steps(c, [Trajectory.stationary()], 300, levels=[0.5, 1.0, 2.0])[:, 0, :]
    big = np.where(steps < 0, 10**9, steps)
    assert np.all(big[:, 0] >= big[:, 1]) and np.all(big[:, 1] >= big[:, 2])
    curves = survival_by_level(c, Trajectory.stationary(), [0.5, 2.0], 300)
    assert np.all(curves[0].survival >= curves[1].survival)


def test_level_thinning_has_the_right_law():
    # the thinned process at level 1 must look like a fresh Poisson(1) run
    c = detection_config(3.0, 0.5, 2, 0.01, 0.01, seed=9)
    s_thin, _ = survival_by_level(c, Trajectory.stationary(), [1.0], 4000)[0].at(0.0)
    expected = math.exp(-ball_volume(2, 0.5))
    assert abs(s_thin - expected) < 3 * math.sqrt(expected * (1 - expected) / 4000)


def test_thread_count_does_not_change_results():
    c = detection_config(1.0, 0.5, 2, 0.05, 1.0, target=Trajectory.brownian(), seed=2)
    a = detection_steps(c, [Trajectory.brownian()], 40, threads=1)
    b = detection_steps(c, [Trajectory.brownian()], 40, threads=4)
    np.testing.assert_array_equal(a, b)


def test_brownian_crosscheck_2d():
    c = detection_config(1.0, 0.5, 2, 0.01, 0.5, target=Trajectory.brownian(), seed=3)
    cc = detection_formula_crosscheck(c, Trajectory.brownian(), 0.5, 3000, 300, inner_paths=32)
    assert cc.passed, cc


def test_stay_put_dominance_1d():
    c = detection_config(1.0, 0.5, 1, 0.01, 4.0, target=Trajectory.brownian(), seed=6)
    rep = stay_put_comparison(c, [1.0, 4.0], 2000)
    assert rep.asserted and rep.passed
    assert set(rep.paired) == {"brownian", "linear"}


def test_stay_put_is_informational_in_2d():
    c = detection_config(1.0, 0.5, 2, 0.05, 1.0, target=Trajectory.brownian(), seed=6)
    rep = stay_put_comparison(c, [1.0], 100)
    assert not rep.asserted and rep.passed is None


def test_point_net_matches_stationary_detection():
    c = detection_config(1.0, 0.5, 2, 0.02, 1.0, seed=12)
    a = compact_detection_tail(build_target("Point", d=2), c, 200)
    b = simulate_detection(c, None, 200)
    np.testing.assert_array_equal(a.survival, b.survival)


def test_preconditions():
    torus = SimConfig(1.0, 1.0, 2, 0.1, 1.0, DomainSpec.torus(10.0))
    with pytest.raises(InvalidInput):
        simulate_detection(torus, None, 1)
    thin = SimConfig(1.0, 1.0, 2, 0.1, 1.0, DomainSpec.boxed(2.0, 0.5))
    with pytest.raises(InvalidInput):
        simulate_detection(thin, None, 1)
    small = detection_config(1.0, 0.5, 1, 0.01, 1.0)  # no room for a moving target
    with pytest.raises(InvalidInput, match="window"):
        simulate_detection(small, Trajectory.linear([50.0]), 1)
    with pytest.raises(InvalidInput):
        detection_steps(small, [Trajectory.stationary()], 1, levels=[2.0])


def test_excursion_bound():
    assert excursion_bound(Trajectory.stationary(), 2, 5.0, 0.1) == 0
    assert excursion_bound(Trajectory.linear([2.0, 0.0]), 2, 5.0, 0.1) == pytest.approx(10.0)
    # sqrt(2 t log(4 d / 1e-6)) at t=1, d=1
    assert excursion_bound(Trajectory.brownian(), 1, 1.0, 0.1) == pytest.approx(5.513947, abs=1e-6)
