from __future__ import annotations

import math

import numpy as np
import pytest

from mobigg.core import InvalidInput, Trajectory
from mobigg.coverage import build_target
from mobigg.sausage import (
    SausageSpec,
    VolumeMethod,
    ball_volume,
    compact_set_sweep_volume,
    drift_comparison,
    dt_refinement,
    sausage_profile,
    sausage_volume,
    sausage_volume_1d,
)


def spitzer_3d(t, r):
    """Exact E vol of the 3-d Wiener sausage (generator Laplacian / 2)."""
    return 4 * math.pi * r**3 / 3 + 2 * math.pi * r * t + 4 * r * r * math.sqrt(2 * math.pi * t)


def test_ball_volumes():
    assert ball_volume(1, 0.5) == pytest.approx(1.0)
    assert ball_volume(2, 1.0) == pytest.approx(math.pi)
    assert ball_volume(3, 2.0) == pytest.approx(32 * math.pi / 3)
    assert ball_volume(4, 1.0) == pytest.approx(math.pi**2 / 2)


def test_closed_form_1d_value():
    # sqrt(8/pi) + 1
    assert sausage_volume_1d(1.0, 0.5) == pytest.approx(2.5957691216057308, abs=1e-12)
    assert sausage_volume_1d(0.0, 0.3) == pytest.approx(0.6)


def test_spec_validation():
    with pytest.raises(InvalidInput):
        SausageSpec(2, 0.0, 1.0)
    with pytest.raises(InvalidInput):
        SausageSpec(2, 1.0, -1.0)
    with pytest.raises(InvalidInput):
        sausage_volume(SausageSpec(2, 1.0, 1.0), 0, 0.01)
    with pytest.raises(InvalidInput):
        sausage_volume(SausageSpec(2, 1.0, 1.0), 10, 0.01, method="ExactMinMax1D")


@pytest.mark.parametrize("d", [1, 2, 3])
def test_t0_is_the_ball(d):
    est = sausage_volume(SausageSpec(d, 0.7, 0.0), 20, 0.01, seed=1)
    assert est.mean == pytest.approx(ball_volume(d, 0.7))
    assert est.std_error == pytest.approx(0, abs=1e-12)


def test_1d_exact_method_matches_closed_form():
    est = sausage_volume(SausageSpec(1, 0.5, 1.0), 4000, 1e-4, seed=3)
    assert est.method is VolumeMethod.EXACT_1D
    exact = sausage_volume_1d(1.0, 0.5)
    # grid undercount at dt=1e-4 is about 0.5%; noise ~0.2%
    assert abs(est.mean - exact) / exact < 0.015


def test_3d_richardson_matches_exact_formula():
    # V(dt) ~ V - c sqrt(dt): 2 V(dt/4) - V(dt) removes the leading grid bias
    (coarse, fine), = dt_refinement(3, 1.0, [1.0], 600, 4e-4, seed=1, samples_per_path=1024)
    rich = 2 * fine.samples - coarse.samples
    se = rich.std(ddof=1) / math.sqrt(len(rich))
    assert abs(rich.mean() - spitzer_3d(1.0, 1.0)) < 3 * se
    assert fine.mean < spitzer_3d(1.0, 1.0)  # grid sausage undercounts


def test_hit_or_miss_agrees_with_voxels_2d():
    kw = dict(seed=5)
    hm = sausage_volume(SausageSpec(2, 1.0, 0.5), 300, 1e-3, method="HitOrMiss", samples_per_path=2048, **kw)
    vx = sausage_volume(SausageSpec(2, 1.0, 0.5), 300, 1e-3, method="Voxel", resolution=0.02, **kw)
    # same paths: the differences are sampling / discretisation noise
    diff = hm.samples - vx.samples
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / math.sqrt(len(diff)) + 0.01 * vx.mean


def test_profile_pathwise_monotone():
    prof = sausage_profile(2, [0.5, 1.0], [0.1, 0.5, 1.0], 50, 1e-2, seed=2, samples_per_path=512)
    v = np.array([[e.samples for e in row] for row in prof])  # (radius, time, path)
    assert np.all(np.diff(v, axis=1) >= -1e-12)
    assert np.all(v[1] >= v[0] - 1e-12)


def test_dt_refinement_coarse_never_exceeds_fine():
    (c, f), = dt_refinement(1, 0.5, [1.0], 200, 1e-3, seed=4)
    assert np.all(c.samples <= f.samples + 1e-12)
    assert abs(f.mean - c.mean) / f.mean < 0.02


def test_drift_enlarges_sausage_1d():
    drifts = [Trajectory.stationary(), Trajectory.linear([1.0]), Trajectory.linear([3.0])]
    out = drift_comparison(1, 0.5, 1.0, drifts, 2000, 1e-3, seed=8)
    vals = list(out.values())
    # common paths: the comparison is sharp
    assert vals[0].mean < vals[1].mean < vals[2].mean
    d1 = vals[1].samples - vals[0].samples
    assert d1.mean() > 3 * d1.std(ddof=1) / math.sqrt(len(d1))


def test_brownian_drift_1d_uses_hit_or_miss():
    out = drift_comparison(1, 0.5, 1.0, [Trajectory.brownian()], 400, 1e-3, seed=8)
    (est,) = out.values()
    assert est.method is VolumeMethod.HIT_OR_MISS
    # difference of two independent Brownian motions: a BM with variance 2
    expected = math.sqrt(8 * 2 / math.pi) + 1.0
    assert abs(est.mean - expected) < 3 * est.std_error + 0.03 * expected


def test_compact_set_sweep_point_reduces_to_ball_sausage():
    K = build_target("Point", d=2)
    sweep = compact_set_sweep_volume(K, 1.0, 0.5, 300, 1e-3, seed=3, samples_per_path=512)
    plain = sausage_volume(SausageSpec(2, 1.0, 0.5), 300, 1e-3, seed=11, samples_per_path=512)
    assert abs(sweep.mean - plain.mean) < 3 * math.hypot(sweep.std_error, plain.std_error)


def test_compact_set_sweep_needs_fine_net():
    with pytest.raises(InvalidInput):
        compact_set_sweep_volume(build_target("Segment", 2.0, 0.5, d=2), 1.0, 0.5, 10, 1e-2)


def test_voxel_cap():
    with pytest.raises(InvalidInput, match="voxel"):
        sausage_volume(SausageSpec(3, 1.0, 1.0), 2, 1e-2, method="Voxel", resolution=0.005, voxel_cap=2**20)
