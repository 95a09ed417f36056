"""Detection of a target by the mobile nodes: direct simulation and the sausage identity.

A trial samples nodes on the window plus buffer and co-evolves them on the dt
grid; the target is detected at the first grid time some node lies within r
of it.  Only nodes that can reach the target's neighbourhood are tracked
(see :class:`~mobigg.core.motion.WindowedNodes`), which is exact in law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import sausage
from .core import rng as streams
from .core.config import BUFFER_DELTA, DomainSpec, InvalidInput, SimConfig
from .core.motion import MotionKind, Trajectory, WindowedNodes
from .core.parallel import map_trials
from .core.stats import TailCurve, tail_from_steps, z_score


@dataclass(frozen=True)
class DetectionTrial:
    config: SimConfig
    target: Trajectory
    detected_at: float | None
    censored: bool

    def __post_init__(self):
        if (self.detected_at is None) != self.censored:
            raise InvalidInput("a trial is either detected or censored")


def excursion_bound(target: Trajectory, d: int, horizon: float, dt: float) -> float:
    """Radius of a centered ball holding the target path up to ``horizon`` (w.h.p. when random)."""
    if target.kind is MotionKind.STATIONARY:
        return 0.0
    if target.kind is MotionKind.DETERMINISTIC:
        n = int(round(horizon / dt))
        path = target.sample(np.arange(n + 1) * dt, d)
        return float(np.max(np.abs(path))) if len(path) else 0.0
    # sup_{s<=t} |B_k(s)| > x has probability <= 2 exp(-x^2 / 2t) per coordinate
    return math.sqrt(2 * target.variance * horizon * math.log(4 * d / BUFFER_DELTA))


def detection_config(
    lam: float,
    r: float,
    d: int,
    dt: float,
    horizon: float,
    *,
    target: Trajectory | None = None,
    seed: int = 0,
    extent: float = 0.0,
) -> SimConfig:
    """SimConfig whose window holds the target (and ``extent`` around it) with a rule-sized buffer."""
    reach = extent
    if target is not None:
        reach += excursion_bound(target, d, horizon, dt)
    window = 2 * max(reach, r)
    return SimConfig(lam, r, d, dt, horizon, DomainSpec.boxed_for(window, r, horizon), seed)


class _Probe:
    """Something to detect: a moving point (``path`` of shape (n+1, d)) or a fixed point cloud."""

    def __init__(self, path=None, points=None):
        self.path = path
        self.points = points
        self.tree = cKDTree(points) if points is not None and len(points) > 1 else None

    def bbox(self):
        p = self.path if self.path is not None else self.points
        return p.min(axis=0), p.max(axis=0)

    def dist2(self, steps, paths):
        """Squared distance from every node to the probe at each step; shape (m, N)."""
        if self.path is not None:
            diff = paths - self.path[steps][:, None, :]
            return np.einsum("mnd,mnd->mn", diff, diff)
        if self.tree is None:
            diff = paths - self.points[0]
            return np.einsum("mnd,mnd->mn", diff, diff)
        m, n, d = paths.shape
        flat = paths.reshape(-1, d)
        out = np.full(m * n, np.inf)
        ok = ~np.isnan(flat[:, 0])
        dist, _ = self.tree.query(flat[ok], k=1)
        out[ok] = dist * dist
        return out.reshape(m, n)


def _trial_first_steps(config: SimConfig, probes, levels, trial: int) -> np.ndarray:
    """First detection step per (probe, level); -1 when undetected by the horizon."""
    d, r2, n = config.d, config.r * config.r, config.n_steps
    out = np.full((len(probes), len(levels)), -1, dtype=np.int64)
    if config.lam == 0:
        return out
    fracs = np.array([lv / config.lam for lv in levels])
    lo = np.min([p.bbox()[0] for p in probes], axis=0) - config.r
    hi = np.max([p.bbox()[1] for p in probes], axis=0) + config.r
    box_lo, box_hi = config.domain.bounds(d)
    nodes = WindowedNodes(
        config.lam, box_lo, box_hi, lo, hi, config.dt, n, streams.stream(config.seed, trial, streams.NODES)
    )

    def record(steps, paths, marks):
        for i, pr in enumerate(probes):
            if np.all(out[i] >= 0):
                continue
            close = pr.dist2(steps, paths) <= r2
            for j, f in enumerate(fracs):
                if out[i, j] >= 0:
                    continue
                hit = np.flatnonzero(np.any(close & (marks < f)[None, :], axis=1))
                if len(hit):
                    out[i, j] = steps[hit[0]]

    record(np.array([0]), nodes.positions[None], nodes.marks)
    while nodes.step < n and np.any(out < 0):
        steps, paths, _, marks = nodes.advance_block(nodes.block_size())
        record(steps, paths, marks)
    return out


def _target_path(target: Trajectory, config: SimConfig, trial: int) -> np.ndarray:
    rng = streams.stream(config.seed, trial, streams.TARGET)
    path = target.sample(config.times(), config.d, rng)
    lo, hi = config.domain.window_bounds(config.d)
    if np.any(path < np.array(lo) - 1e-12) or np.any(path > np.array(hi) + 1e-12):
        raise InvalidInput("target leaves the window; enlarge it (see detection_config)")
    return path


def _check(config: SimConfig, levels):
    if config.domain.is_torus:
        raise InvalidInput("detection runs on a boxed plane")
    config.check_buffer()
    for lv in levels:
        if not 0 <= lv <= config.lam:
            raise InvalidInput("levels must lie in [0, lam]")


def detection_steps(
    config: SimConfig,
    targets,
    trials: int,
    *,
    levels=None,
    threads: int | None = None,
) -> np.ndarray:
    """First detection steps, shape (trials, len(targets), len(levels)); -1 when censored.

    All targets of a trial face the same nodes; level ``lam'`` keeps the nodes
    with mark < lam'/lam, so detection is pathwise monotone in the level.
    """
    levels = [config.lam] if levels is None else [float(x) for x in levels]
    _check(config, levels)

    def run(trial):
        probes = [_Probe(path=_target_path(g, config, trial)) for g in targets]
        return _trial_first_steps(config, probes, levels, trial)

    res = map_trials(run, trials, threads)
    return np.stack(res) if res else np.empty((0, len(targets), len(levels)), np.int64)


def simulate_detection(
    config: SimConfig,
    target: Trajectory | None = None,
    trials: int = 1000,
    *,
    threads: int | None = None,
) -> TailCurve:
    """Empirical tail P[T_det > t] on the config's time grid."""
    target = Trajectory.stationary() if target is None else target
    steps = detection_steps(config, [target], trials, threads=threads)
    return tail_from_steps(steps[:, 0, 0], config.n_steps, config.dt)


def detection_trials(config: SimConfig, target: Trajectory, trials: int, *, threads=None) -> list:
    steps = detection_steps(config, [target], trials, threads=threads)[:, 0, 0]
    return [
        DetectionTrial(config, target, None if s < 0 else s * config.dt, bool(s < 0)) for s in steps
    ]


def survival_by_level(config: SimConfig, target: Trajectory, levels, trials: int, *, threads=None) -> list:
    """Tail curves for each intensity in ``levels`` from one coupled run."""
    steps = detection_steps(config, [target], trials, levels=levels, threads=threads)
    return [tail_from_steps(steps[:, 0, j], config.n_steps, config.dt) for j in range(len(levels))]


@dataclass
class CrossCheck:
    t: float
    direct: float
    direct_se: float
    formula: float
    formula_se: float
    z: float
    passed: bool
    closed_form: float | None = None
    volume: object = None
    extra: dict = field(default_factory=dict)


def _volume_for_path(g: np.ndarray, config: SimConfig, t: float, paths: int, seed: int) -> float:
    n = int(round(t / config.dt))
    drift = Trajectory.deterministic(lambda s, g=g[: n + 1]: g, label="sampled")
    spec = sausage.SausageSpec(config.d, config.r, t, drift)
    return sausage.sausage_volume(spec, paths, config.dt, seed=seed).mean


def detection_formula_crosscheck(
    config: SimConfig,
    target: Trajectory | None,
    t: float,
    trials: int,
    paths: int,
    *,
    inner_paths: int = 32,
    threads: int | None = None,
    curve: TailCurve | None = None,
) -> CrossCheck:
    """Compare direct survival at ``t`` with exp(-lam E vol W_g(t)).

    For a Brownian target the oracle averages exp(-lam V(g)) over ``paths``
    target paths, V(g) being a sausage estimate from ``inner_paths`` node paths
    (inner noise adds a small upward Jensen bias).  A precomputed ``curve``
    for the same config may be passed to skip the direct simulation.
    """
    target = Trajectory.stationary() if target is None else target
    if curve is None:
        curve = simulate_detection(config.with_(horizon=t), target, trials, threads=threads)
    s, s_se = curve.at(t)
    lam = config.lam
    vol_seed = config.seed + 1  # oracle paths independent of the simulation
    closed = None
    if lam == 0:
        return CrossCheck(t, s, s_se, 1.0, 0.0, 0.0, s == 1.0, 1.0)
    if target.kind is MotionKind.BROWNIAN:
        rng = streams.stream(vol_seed, 0, streams.AUX)
        n = int(round(t / config.dt))
        vals = np.empty(paths)
        for p in range(paths):
            g = target.sample(np.arange(n + 1) * config.dt, config.d, rng)
            vals[p] = math.exp(-lam * _volume_for_path(g, config, t, inner_paths, vol_seed + 1 + p))
        f, f_se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
        vol = None
    else:
        spec = sausage.SausageSpec(config.d, config.r, t, target)
        vol = sausage.sausage_volume(spec, paths, config.dt, seed=vol_seed)
        f = math.exp(-lam * vol.mean)
        f_se = lam * f * vol.std_error
        if config.d == 1 and target.kind is MotionKind.STATIONARY:
            closed = math.exp(-lam * sausage.sausage_volume_1d(t, config.r))
    # score test: under the null the direct estimate has binomial variance f(1-f)/n
    s_se = max(s_se, math.sqrt(f * (1 - f) / max(curve.trials, 1)))
    z = z_score(s, s_se, f, f_se)
    return CrossCheck(t, s, s_se, f, f_se, z, abs(z) <= 3, closed, vol)


def compact_detection_tail(K, config: SimConfig, trials: int, *, threads: int | None = None) -> TailCurve:
    """Survival of the first grid time some node is within r of the (fixed) net of ``K``."""
    pts = np.asarray(K.points, float)
    if len(pts) == 0:
        raise InvalidInput("target set is empty")
    lo, hi = config.domain.window_bounds(config.d)
    if np.any(pts < np.array(lo)) or np.any(pts > np.array(hi)):
        raise InvalidInput("target set must lie in the window")
    _check(config, [config.lam])
    probe = _Probe(points=pts)

    def run(trial):
        return _trial_first_steps(config, [probe], [config.lam], trial)[0, 0]

    steps = np.array(map_trials(run, trials, threads), dtype=np.int64)
    return tail_from_steps(steps, config.n_steps, config.dt)


@dataclass
class StayPutReport:
    times: list
    curves: dict
    paired: dict  # label -> list of (difference, se) vs stationary at each time
    asserted: bool
    passed: bool | None


def stay_put_comparison(
    config: SimConfig,
    times,
    trials: int,
    *,
    targets: dict | None = None,
    threads: int | None = None,
) -> StayPutReport:
    """Survival for stationary, Brownian and linear-drift targets facing the same nodes.

    In d=1 the report asserts stationary >= other - 3 sigma (paired) at every
    requested time; for d >= 2 it is informational and ``passed`` is None.
    """
    times = [float(x) for x in np.atleast_1d(times)]
    if targets is None:
        e1 = np.zeros(config.d)
        e1[0] = 1.0
        targets = {
            "stationary": Trajectory.stationary(),
            "brownian": Trajectory.brownian(),
            "linear": Trajectory.linear(e1),
        }
    if "stationary" not in targets:
        targets = {"stationary": Trajectory.stationary(), **targets}
    labels = list(targets)
    steps = detection_steps(config, [targets[k] for k in labels], trials, threads=threads)[:, :, 0]
    curves = {k: tail_from_steps(steps[:, i], config.n_steps, config.dt) for i, k in enumerate(labels)}
    paired = {}
    ok = True
    for i, k in enumerate(labels[1:], start=1):
        rows = []
        for t in times:
            s = int(round(t / config.dt))
            alive0 = (steps[:, 0] < 0) | (steps[:, 0] > s)
            alive = (steps[:, i] < 0) | (steps[:, i] > s)
            diff = alive0.astype(float) - alive.astype(float)
            se = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
            rows.append((float(diff.mean()), se))
            ok &= diff.mean() >= -3 * se
        paired[k] = rows
    asserted = config.d == 1
    return StayPutReport(times, curves, paired, asserted, bool(ok) if asserted else None)
