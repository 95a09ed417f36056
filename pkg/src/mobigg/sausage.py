"""Expected Wiener sausage volumes E vol(union_{s<=t} B(g(s) - zeta(s), r)).

All estimators work on the dt grid: the sausage is the union of balls at the
sampled relative path points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma

from .core import rng as streams
from .core.config import InvalidInput
from .core.motion import MotionKind, Trajectory, brownian_path

DEFAULT_VOXEL_CAP = 256 * 2**20  # bytes


class VolumeMethod(str, Enum):
    EXACT_1D = "ExactMinMax1D"
    HIT_OR_MISS = "HitOrMiss"
    VOXEL = "Voxel"


def ball_volume(d: int, radius: float = 1.0) -> float:
    return math.pi ** (d / 2) / gamma(d / 2 + 1) * radius**d


def sausage_volume_1d(t: float, r: float) -> float:
    """Closed form E vol W_0(t) = sqrt(8t/pi) + 2r in one dimension."""
    return math.sqrt(8 * t / math.pi) + 2 * r


@dataclass(frozen=True)
class SausageSpec:
    d: int
    r: float
    t: float
    drift: Trajectory = field(default_factory=Trajectory.stationary)
    enlarged_set: object = None  # TargetSet

    def __post_init__(self):
        if not self.r > 0:
            raise InvalidInput("sausage radius must be > 0")
        if self.t < 0:
            raise InvalidInput("t must be >= 0")


@dataclass
class VolumeEstimate:
    mean: float
    std_error: float
    method: VolumeMethod
    paths: int
    dt: float
    samples: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.method = VolumeMethod(self.method)


def _estimate(samples: np.ndarray, method, dt) -> VolumeEstimate:
    n = len(samples)
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return VolumeEstimate(float(samples.mean()), se, method, n, dt, samples)


def _n_steps(t: float, dt: float) -> int:
    return int(round(t / dt))


def _default_method(d: int, drift: Trajectory) -> VolumeMethod:
    if d == 1 and drift.kind is not MotionKind.BROWNIAN:
        return VolumeMethod.EXACT_1D
    return VolumeMethod.HIT_OR_MISS


def _relative_path(drift: Trajectory, zeta: np.ndarray, times: np.ndarray, rng) -> np.ndarray:
    return drift.sample(times, zeta.shape[1], rng) - zeta


def _voxel_count(path: np.ndarray, r: float, lo, hi, h: float, offset: np.ndarray, cap: int) -> float:
    """Volume of the voxel union: voxel centers (grid shifted by ``offset``) within r of the path."""
    d = path.shape[1]
    start = np.floor((lo - offset) / h) * h + offset
    counts = np.ceil((hi - start) / h).astype(int) + 1
    n_vox = int(np.prod(counts))
    need = n_vox * 8 * (d + 1)
    if need > cap:
        raise InvalidInput(
            f"voxel grid needs ~{need / 2**20:.0f} MiB (> cap {cap / 2**20:.0f} MiB); "
            f"raise voxel_cap or coarsen the resolution (now {h:g})"
        )
    axes = [start[k] + h * (np.arange(counts[k]) + 0.5) for k in range(d)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    tree = cKDTree(path)
    dist, _ = tree.query(centers, k=1, distance_upper_bound=r * (1 + 1e-12))
    return float(np.count_nonzero(dist <= r)) * h**d


def _path_frame(rel, rmax, method, rng, samples, h):
    """Bounding box of the path inflated by rmax plus the shared random samples."""
    d = rel.shape[1]
    lo = rel.min(axis=0) - rmax
    hi = rel.max(axis=0) + rmax
    pts = offset = None
    if method is VolumeMethod.HIT_OR_MISS:
        pts = lo + (hi - lo) * rng.random((samples, d))
    elif method is VolumeMethod.VOXEL:
        offset = h * rng.random(d)
    return lo, hi, pts, offset


def _path_volumes(rel, radii, cut, method, lo, hi, pts, h, offset, cap) -> np.ndarray:
    """Sausage volumes of one relative path for each radius and each prefix length in ``cut``."""
    out = np.empty((len(radii), len(cut)))
    if method is VolumeMethod.EXACT_1D:
        run_max = np.maximum.accumulate(rel[:, 0])
        run_min = np.minimum.accumulate(rel[:, 0])
        for j, c in enumerate(cut):
            span = run_max[c - 1] - run_min[c - 1]
            out[:, j] = [2 * r + span for r in radii]
        return out
    d = rel.shape[1]
    box = float(np.prod(hi - lo))
    rmax = max(radii)
    for j, c in enumerate(cut):
        if c == 1:
            # a single ball
            out[:, j] = [ball_volume(d, r) for r in radii]
            continue
        if method is VolumeMethod.HIT_OR_MISS:
            dist, _ = cKDTree(rel[:c]).query(pts, k=1, distance_upper_bound=rmax * (1 + 1e-12))
            for i, r in enumerate(radii):
                out[i, j] = box * np.count_nonzero(dist <= r) / len(pts)
        else:
            for i, r in enumerate(radii):
                out[i, j] = _voxel_count(rel[:c], r, lo, hi, h, offset, cap)
    return out


def sausage_volume(
    spec: SausageSpec,
    paths: int,
    dt: float,
    *,
    method: VolumeMethod | str | None = None,
    seed: int = 0,
    samples_per_path: int = 256,
    resolution: float | None = None,
    voxel_cap: int = DEFAULT_VOXEL_CAP,
) -> VolumeEstimate:
    """Monte Carlo estimate of the expected sausage volume on the dt grid.

    ``ExactMinMax1D`` uses vol = 2r + max - min of the relative path.
    ``HitOrMiss`` samples ``samples_per_path`` uniform points in the path's
    bounding box inflated by r.  ``Voxel`` counts voxel centers of a grid of
    side ``resolution`` (default r/10) with a uniformly random offset per path.
    """
    if paths < 1:
        raise InvalidInput("paths must be >= 1")
    if spec.enlarged_set is not None:
        return compact_set_sweep_volume(
            spec.enlarged_set, spec.r, spec.t, paths, dt, seed=seed, samples_per_path=samples_per_path
        )
    method = _default_method(spec.d, spec.drift) if method is None else VolumeMethod(method)
    if method is VolumeMethod.EXACT_1D and (spec.d != 1 or spec.drift.kind is MotionKind.BROWNIAN):
        raise InvalidInput("ExactMinMax1D needs d=1 and a stationary or deterministic drift")
    prof = sausage_profile(
        spec.d, [spec.r], [spec.t], paths, dt, drift=spec.drift, method=method, seed=seed,
        samples_per_path=samples_per_path, resolution=resolution, voxel_cap=voxel_cap,
    )
    return prof[0][0]


def sausage_profile(
    d: int,
    radii,
    times,
    paths: int,
    dt: float,
    *,
    drift: Trajectory | None = None,
    method: VolumeMethod | str | None = None,
    seed: int = 0,
    samples_per_path: int = 256,
    resolution: float | None = None,
    voxel_cap: int = DEFAULT_VOXEL_CAP,
    zeta_purpose: int = streams.NODES,
) -> list:
    """Volume estimates for every (radius, time) pair from shared paths.

    Each path is sampled once up to max(times); hit-or-miss points (or the
    voxel grid) are shared across all (r, t), so per-path estimates are
    non-decreasing in both r and t.  Returns ``out[i][j]`` for radii[i], times[j].
    """
    drift = Trajectory.stationary() if drift is None else drift
    radii = [float(x) for x in radii]
    times_req = [float(x) for x in times]
    if min(radii) <= 0:
        raise InvalidInput("radii must be > 0")
    method = _default_method(d, drift) if method is None else VolumeMethod(method)
    t_max = max(times_req)
    n = _n_steps(t_max, dt)
    grid = np.arange(n + 1) * dt
    cut = [_n_steps(t, dt) + 1 for t in times_req]
    vols = np.empty((paths, len(radii), len(times_req)))
    rmax = max(radii)
    h = rmax / 10 if resolution is None else float(resolution)
    for p in range(paths):
        g_z = streams.stream(seed, p, zeta_purpose)
        g_t = streams.stream(seed, p, streams.TARGET)
        zeta = brownian_path(g_z, n, dt, d)
        rel = _relative_path(drift, zeta, grid, g_t)
        lo, hi, pts, offset = _path_frame(rel, rmax, method, g_z, samples_per_path, h)
        vols[p] = _path_volumes(rel, radii, cut, method, lo, hi, pts, h, offset, voxel_cap)
    return [[_estimate(vols[:, i, j], method, dt) for j in range(len(times_req))] for i in range(len(radii))]


def dt_refinement(
    d: int,
    r: float,
    times,
    paths: int,
    dt: float,
    *,
    factor: int = 4,
    method: VolumeMethod | str | None = None,
    seed: int = 0,
    samples_per_path: int = 256,
) -> list:
    """Estimates at ``dt`` and ``dt/factor`` from the same fine paths (g = 0).

    The coarse grid is the fine path subsampled every ``factor`` points, with
    the same hit-or-miss samples, so the coarse volume never exceeds the fine
    one pathwise.  Returns [(coarse, fine)] per requested time.
    """
    method = _default_method(d, Trajectory.stationary()) if method is None else VolumeMethod(method)
    times = [float(x) for x in times]
    fine_dt = dt / factor
    n = _n_steps(max(times), dt) * factor
    cut_f = [_n_steps(t, dt) * factor + 1 for t in times]
    cut_c = [_n_steps(t, dt) + 1 for t in times]
    h = r / 10
    fine = np.empty((paths, len(times)))
    coarse = np.empty((paths, len(times)))
    for p in range(paths):
        g = streams.stream(seed, p, streams.NODES)
        rel = -brownian_path(g, n, fine_dt, d)
        lo, hi, pts, offset = _path_frame(rel, r, method, g, samples_per_path, h)
        fine[p] = _path_volumes(rel, [r], cut_f, method, lo, hi, pts, h, offset, DEFAULT_VOXEL_CAP)[0]
        coarse[p] = _path_volumes(rel[::factor], [r], cut_c, method, lo, hi, pts, h, offset, DEFAULT_VOXEL_CAP)[0]
    return [
        (_estimate(coarse[:, j], method, dt), _estimate(fine[:, j], method, fine_dt)) for j in range(len(times))
    ]


def drift_comparison(
    d: int,
    r: float,
    t: float,
    drifts,
    paths: int,
    dt: float,
    *,
    seed: int = 0,
    method: VolumeMethod | str | None = None,
    samples_per_path: int = 256,
) -> dict:
    """Volume estimates for several drifts driven by the same zeta paths and sample points.

    Returns {label: VolumeEstimate}; a Brownian drift draws its own path from
    an independent stream.  Labels default to ``drift.label`` (deduplicated by
    position).
    """
    out = {}
    for k, g in enumerate(drifts):
        label = g.label or f"drift{k}"
        if label in out:
            label = f"{label}#{k}"
        m = method
        if m is None:
            m = VolumeMethod.EXACT_1D if d == 1 and g.kind is not MotionKind.BROWNIAN else VolumeMethod.HIT_OR_MISS
        if d == 1 and g.kind is MotionKind.BROWNIAN and VolumeMethod(m) is VolumeMethod.EXACT_1D:
            raise InvalidInput("ExactMinMax1D does not apply to a Brownian drift")
        out[label] = sausage_profile(
            d, [r], [t], paths, dt, drift=g, method=m, seed=seed, samples_per_path=samples_per_path
        )[0][0]
    return out


def compact_set_sweep_volume(
    K,
    r: float,
    t: float,
    paths: int,
    dt: float,
    *,
    seed: int = 0,
    samples_per_path: int = 128,
) -> VolumeEstimate:
    """Hit-or-miss estimate of E vol(union_{s<=t} (K^r - zeta(s))) from the eps-net of K.

    A point x lies in the swept body iff some x + zeta(s) is within r of a net point.
    """
    net = np.asarray(K.points, float)
    if len(net) == 0:
        raise InvalidInput("target set is empty")
    if K.epsilon > r / 10 + 1e-12:
        raise InvalidInput(f"net resolution {K.epsilon:g} exceeds r/10 = {r / 10:g}")
    d = net.shape[1]
    n = _n_steps(t, dt)
    tree = cKDTree(net)
    nlo, nhi = net.min(axis=0), net.max(axis=0)
    vols = np.empty(paths)
    for p in range(paths):
        g = streams.stream(seed, p, streams.NODES)
        zeta = brownian_path(g, n, dt, d)
        lo = nlo - zeta.max(axis=0) - r
        hi = nhi - zeta.min(axis=0) + r
        x = lo + (hi - lo) * g.random((samples_per_path, d))
        inside = np.zeros(samples_per_path, dtype=bool)
        # coarse-to-fine over path points: most decisions come early
        for stride in (max(1, (n + 1) // 8), 1):
            todo = np.flatnonzero(~inside)
            if not len(todo):
                break
            zs = zeta[::stride]
            q = (x[todo, None, :] + zs[None, :, :]).reshape(-1, d)
            dist, _ = tree.query(q, k=1, distance_upper_bound=r * (1 + 1e-12))
            hit = (dist <= r).reshape(len(todo), len(zs)).any(axis=1)
            inside[todo[hit]] = True
        vols[p] = float(np.prod(hi - lo)) * inside.mean()
    return _estimate(vols, VolumeMethod.HIT_OR_MISS, dt)
