"""Coverage of a target set: eps-nets of known dimension, cover times and their growth in R."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numba
import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma

from .core import rng as streams
from .core.config import DomainSpec, InvalidInput, SimConfig
from .core.motion import WindowedNodes
from .core.parallel import map_trials
from .core.stats import linear_fit

DEFAULT_NET_CAP = 4_000_000
LOG32 = math.log(2) / math.log(3)


class SetKind(str, Enum):
    POINT = "Point"
    SEGMENT = "Segment"
    CUBE = "Cube"
    CANTOR = "CantorIterate"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class Lattice:
    """Net points origin + spacing * index for index in the box ``shape``."""

    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple


@dataclass(frozen=True)
class TargetSet:
    """An eps-net of R*A placed with its bounding box centered at the origin.

    ``epsilon`` is the resolution actually achieved by the net (at most the
    requested one; 0 for a point).
    """

    kind: SetKind
    points: np.ndarray
    epsilon: float
    scale: float
    level: int | None = None
    lattice: Lattice | None = None

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def dimension(self) -> float:
        """Minkowski dimension of the underlying set A."""
        return {
            SetKind.POINT: 0.0,
            SetKind.SEGMENT: 1.0,
            SetKind.CUBE: float(self.d),
            SetKind.CANTOR: self.d * LOG32,
        }.get(self.kind, float("nan"))

    def __len__(self) -> int:
        return len(self.points)


def _axis_net(length: float, eps: float) -> tuple:
    """Evenly spaced points on [0, length], spacing <= 2 eps; returns (points, half spacing)."""
    if length <= 0:
        return np.zeros(1), 0.0
    m = int(math.ceil(length / (2 * eps) - 1e-12)) + 1
    return np.linspace(0.0, length, m), length / (2 * (m - 1))


def cantor_intervals(level: int) -> np.ndarray:
    """Left endpoints of the 2^level intervals of the middle-thirds iterate of [0, 1]."""
    left = np.zeros(1)
    for k in range(level):
        left = np.concatenate([left, left + 2 * 3.0 ** -(k + 1)])
    return np.sort(left)


def build_target(
    kind,
    R: float = 1.0,
    epsilon: float = 0.1,
    *,
    d: int = 1,
    level: int | None = None,
    points=None,
    net_cap: int = DEFAULT_NET_CAP,
) -> TargetSet:
    """Build an eps-net of R*A for the set kinds Point, Segment, Cube, CantorIterate, Custom.

    Segment is [0, R] along the first axis; Cube is [0, R]^d; CantorIterate
    (d in {1, 2}) is the ``level``-th middle-thirds iterate or its square.
    Custom takes ``points`` as the net and ``epsilon`` as its declared resolution.
    """
    kind = SetKind(kind)
    if not epsilon > 0:
        raise InvalidInput("epsilon must be > 0")
    if not R > 0:
        raise InvalidInput("scale R must be > 0")
    lattice = None
    if kind is SetKind.POINT:
        pts, eps = np.zeros((1, d)), 0.0
        lattice = Lattice(np.zeros(d), np.ones(d), (1,) * d)
    elif kind is SetKind.SEGMENT:
        ax, eps = _axis_net(R, epsilon)
        _cap(len(ax), net_cap)
        pts = np.zeros((len(ax), d))
        pts[:, 0] = ax
        sp = np.ones(d)
        sp[0] = ax[1] - ax[0] if len(ax) > 1 else 1.0
        lattice = Lattice(np.zeros(d), sp, (len(ax),) + (1,) * (d - 1))
    elif kind is SetKind.CUBE:
        ax, half = _axis_net(R, epsilon / math.sqrt(d))
        _cap(len(ax) ** d, net_cap)
        pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
        eps = half * math.sqrt(d)
        lattice = Lattice(np.zeros(d), np.full(d, ax[1] - ax[0] if len(ax) > 1 else 1.0), (len(ax),) * d)
    elif kind is SetKind.CANTOR:
        if level is None or level < 0:
            raise InvalidInput("CantorIterate needs a level >= 0")
        if d not in (1, 2):
            raise InvalidInput("CantorIterate is defined for d = 1 or 2")
        seg = R * 3.0**-level
        ax, half = _axis_net(seg, epsilon / math.sqrt(d))
        _cap((2**level * len(ax)) ** d, net_cap)
        line = (R * cantor_intervals(level)[:, None] + ax[None, :]).ravel()
        pts = np.stack(np.meshgrid(*([line] * d), indexing="ij"), axis=-1).reshape(-1, d)
        eps = half * math.sqrt(d)
    else:
        if points is None:
            raise InvalidInput("Custom sets need points")
        pts = np.atleast_2d(np.asarray(points, float))
        if len(pts) == 0:
            raise InvalidInput("target set is empty")
        _cap(len(pts), net_cap)
        return TargetSet(kind, pts, float(epsilon), float(R))
    shift = (pts.max(axis=0) + pts.min(axis=0)) / 2
    pts = pts - shift
    if lattice is not None:
        lattice = Lattice(lattice.origin - shift, lattice.spacing, lattice.shape)
    return TargetSet(kind, pts, float(eps), float(R), level, lattice)


def _cap(n: int, cap: int) -> None:
    if n > cap:
        raise InvalidInput(f"net would hold {n} points (cap {cap}); lower the level or raise epsilon")


def box_counting(points, scales) -> dict:
    """Number of grid boxes of each side ``s`` meeting the point set, and the fitted slope.

    Boxes are half-open [k s, (k+1) s); the slope of log N(s) against log(1/s)
    estimates the Minkowski dimension.
    """
    pts = np.atleast_2d(np.asarray(points, float))
    pts = pts - pts.min(axis=0)
    scales = np.asarray(scales, float)
    counts = np.array([len(np.unique(np.floor(pts / s + 1e-9).astype(np.int64), axis=0)) for s in scales])
    fit = linear_fit(np.log(1 / scales), np.log(counts))
    return {"scales": scales, "counts": counts, "slope": fit["slope"], "r2": fit["r2"]}


def packing_number(points, eps: float) -> int:
    """Greedy count of net points with pairwise distance > 2 eps (disjoint eps-balls)."""
    pts = np.atleast_2d(np.asarray(points, float))
    tree = cKDTree(pts)
    free = np.ones(len(pts), dtype=bool)
    count = 0
    for i in range(len(pts)):
        if not free[i]:
            continue
        count += 1
        free[tree.query_ball_point(pts[i], 2 * eps)] = False
    return count


class CoverState:
    """First grid step at which each net point came within the cover radius of a node."""

    def __init__(self, n_points: int):
        self.first = np.full(n_points, np.iinfo(np.int64).max, dtype=np.int64)
        self.step = 0

    @property
    def uncovered(self) -> np.ndarray:
        return np.flatnonzero(self.first > self.step)

    @property
    def done(self) -> bool:
        return bool(np.all(self.first <= self.step))

    def mark(self, idx: np.ndarray, steps: np.ndarray) -> None:
        np.minimum.at(self.first, idx, steps)

    def cover_step(self) -> int:
        return int(self.first.max()) if self.done else -1


@numba.njit(cache=True)
def _lattice_mark(pos, step_of, origin, spacing, shape, rad, first):
    """Lower ``first[q]`` to the step of every node within ``rad`` of lattice point q."""
    n, d = pos.shape
    lo = np.empty(d, np.int64)
    cnt = np.empty(d, np.int64)
    idx = np.empty(d, np.int64)
    r2 = rad * rad
    for i in range(n):
        if np.isnan(pos[i, 0]):
            continue
        total = 1
        for k in range(d):
            a = int(np.ceil((pos[i, k] - origin[k] - rad) / spacing[k] - 1e-12))
            b = int(np.floor((pos[i, k] - origin[k] + rad) / spacing[k] + 1e-12))
            a = max(a, 0)
            b = min(b, shape[k] - 1)
            if b < a:
                total = 0
                break
            lo[k] = a
            cnt[k] = b - a + 1
            total *= cnt[k]
        for c in range(total):
            rem = c
            s = 0.0
            flat = 0
            for k in range(d - 1, -1, -1):
                idx[k] = lo[k] + rem % cnt[k]
                rem //= cnt[k]
            for k in range(d):
                dx = pos[i, k] - (origin[k] + idx[k] * spacing[k])
                s += dx * dx
                flat = flat * shape[k] + idx[k]
            if s <= r2 and step_of[i] < first[flat]:
                first[flat] = step_of[i]


@dataclass
class _Net:
    points: np.ndarray
    radius: float
    lattice: Lattice | None


def _mark_block(net: _Net, state: CoverState, steps, paths, keep):
    m, n, d = paths.shape
    if net.lattice is not None:
        lat = net.lattice
        flat = np.ascontiguousarray(paths[:, keep, :].reshape(-1, d))
        step_of = np.repeat(np.asarray(steps, np.int64), int(keep.sum()))
        _lattice_mark(
            flat, step_of, lat.origin, lat.spacing, np.array(lat.shape, np.int64), net.radius, state.first
        )
        return
    for j in range(m):
        pos = paths[j, keep]
        pos = pos[~np.isnan(pos[:, 0])]
        todo = np.flatnonzero(state.first > steps[j])
        if not len(pos) or not len(todo):
            continue
        dist, _ = cKDTree(pos).query(net.points[todo], k=1, distance_upper_bound=net.radius * (1 + 1e-12))
        hit = todo[dist <= net.radius]
        state.first[hit] = np.minimum(state.first[hit], steps[j])


def coupled_cover_steps(config: SimConfig, nets, trial: int, *, levels=None) -> np.ndarray:
    """Cover steps of several nets under the same nodes; shape (len(nets), len(levels)), -1 if censored.

    ``nets`` holds (points or TargetSet, cover radius) pairs.  Level ``lam'``
    keeps nodes with mark < lam'/lam (superposition coupling).
    """
    levels = [config.lam] if levels is None else [float(x) for x in levels]
    nl = []
    for obj, rad in nets:
        if isinstance(obj, TargetSet):
            nl.append(_Net(obj.points, float(rad), obj.lattice))
        else:
            nl.append(_Net(np.atleast_2d(np.asarray(obj, float)), float(rad), None))
    out = np.full((len(nl), len(levels)), -1, dtype=np.int64)
    if config.lam == 0:
        return out
    if min(x.radius for x in nl) <= 0:
        raise InvalidInput("cover radius must be > 0 (epsilon < r)")
    d = config.d
    lo = np.min([x.points.min(axis=0) - x.radius for x in nl], axis=0)
    hi = np.max([x.points.max(axis=0) + x.radius for x in nl], axis=0)
    box_lo, box_hi = config.domain.bounds(d)
    nodes = WindowedNodes(
        config.lam, box_lo, box_hi, lo, hi, config.dt, config.n_steps,
        streams.stream(config.seed, trial, streams.NODES),
    )
    states = {(i, j): CoverState(len(x.points)) for i, x in enumerate(nl) for j in range(len(levels))}
    fracs = [lv / config.lam for lv in levels]

    def update(steps, paths, marks):
        for (i, j), st in states.items():
            if out[i, j] >= 0:
                continue
            _mark_block(nl[i], st, steps, paths, marks < fracs[j])
            st.step = int(steps[-1])
            if st.done:
                out[i, j] = st.cover_step()

    update(np.array([0]), nodes.positions[None], nodes.marks)
    while nodes.step < config.n_steps and np.any(out < 0):
        steps, paths, _, marks = nodes.advance_block(nodes.block_size())
        update(steps, paths, marks)
    return out


def coverage_config(
    target: TargetSet, lam: float, r: float, dt: float, horizon: float, *, seed: int = 0
) -> SimConfig:
    """SimConfig whose window holds the set enlarged by r, with a rule-sized buffer."""
    half = float(np.max(np.abs(target.points))) + r
    return SimConfig(lam, r, target.d, dt, horizon, DomainSpec.boxed_for(2 * half, r, horizon), seed)


@dataclass
class CoverEstimate:
    times: np.ndarray  # cover times of uncensored trials, in trial order
    censored: int
    trials: int
    mean: float
    std_error: float
    unreliable: bool
    steps: np.ndarray = field(repr=False, default=None)

    @property
    def cv(self) -> float:
        """Empirical coefficient of variation of the uncensored cover times."""
        return float(self.times.std(ddof=1) / self.times.mean()) if len(self.times) > 1 and self.mean > 0 else math.nan


def _summarize(steps: np.ndarray, dt: float) -> CoverEstimate:
    steps = np.asarray(steps, np.int64)
    ok = steps >= 0
    times = steps[ok] * dt
    n = len(times)
    mean = float(times.mean()) if n else math.nan
    se = float(times.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    censored = int(len(steps) - n)
    return CoverEstimate(times, censored, len(steps), mean, se, censored > 0.5 * len(steps), steps)


def _check(target: TargetSet, config: SimConfig):
    if config.domain.is_torus:
        raise InvalidInput("coverage runs on a boxed plane")
    if target.d != config.d:
        raise InvalidInput("target set and config have different dimensions")
    if not target.epsilon < config.r:
        raise InvalidInput("net resolution must be smaller than r")
    config.check_buffer()
    lo, hi = config.domain.window_bounds(config.d)
    if np.any(target.points < np.array(lo)) or np.any(target.points > np.array(hi)):
        raise InvalidInput("target set must lie in the window (see coverage_config)")


def estimate_cover_time(
    target: TargetSet,
    config: SimConfig,
    trials: int,
    *,
    threads: int | None = None,
) -> CoverEstimate:
    """Sample T_cov: first grid time every net point has been within r - epsilon of a node.

    The mean is over uncensored trials; the estimate is flagged unreliable
    when more than half of the trials reach the horizon uncovered.
    """
    _check(target, config)
    rad = config.r - target.epsilon

    def run(trial):
        return coupled_cover_steps(config, [(target, rad)], trial)[0, 0]

    return _summarize(np.array(map_trials(run, trials, threads)), config.dt)


def cover_time_levels(target: TargetSet, config: SimConfig, levels, trials: int, *, threads=None) -> list:
    """Cover-time estimates at several intensities from one coupled run."""
    _check(target, config)
    rad = config.r - target.epsilon

    def run(trial):
        return coupled_cover_steps(config, [(target, rad)], trial, levels=levels)[0]

    steps = np.array(map_trials(run, trials, threads))
    return [_summarize(steps[:, j], config.dt) for j in range(len(levels))]


def capacity_constant(d: int) -> float:
    """Newtonian capacity of the unit ball in R^d (d >= 3): 2 pi^{d/2} / Gamma(d/2 - 1)."""
    if d < 3:
        raise InvalidInput("capacity constant is for d >= 3")
    return 2 * math.pi ** (d / 2) / gamma(d / 2 - 1)


def rate_function(d: int, alpha: float, lam: float, r: float, R):
    """Leading-order growth of E T_cov(RA) for a set of dimension alpha."""
    R = np.asarray(R, float)
    L = np.log(R)
    if d == 1:
        return alpha**2 * math.pi / (8 * lam**2) * L**2
    if d == 2:
        return alpha / (2 * math.pi * lam) * L * np.log(L)
    return alpha * L / (lam * capacity_constant(d) * r ** (d - 2))


@dataclass
class ScalingStudy:
    kind: str
    R: list
    estimates: list
    fit_rate: dict  # regression of mean T_cov on the rate function
    fit_log: dict  # regression of mean T_cov on log R
    compare_kind: str | None = None
    compare: list | None = None
    ratio: float | None = None  # kind over compare_kind at the largest R
    ratio_se: float | None = None

    def rows(self) -> list:
        out = []
        for i, (R, e) in enumerate(zip(self.R, self.estimates)):
            row = {"kind": self.kind, "R": R, "mean": e.mean, "std_error": e.std_error, "censored": e.censored}
            if self.compare is not None:
                c = self.compare[i]
                row.update({"compare_mean": c.mean, "compare_std_error": c.std_error})
            out.append(row)
        return out


def coverage_scaling_study(
    kind,
    R_list,
    config: SimConfig,
    trials: int,
    *,
    epsilon: float,
    level: int | None = None,
    compare_kind=None,
    threads: int | None = None,
) -> ScalingStudy:
    """Mean T_cov(R A) over a geometric list of scales with growth-law diagnostics.

    ``config`` supplies lam, r, d, dt, horizon and seed; the window is sized
    per R.  ``trials`` is a count or one count per scale.  With ``compare_kind`` the second set is run at every R and the
    ratio kind/compare_kind of the means at the largest R is reported.
    """
    R_list = [float(x) for x in R_list]
    if len(R_list) < 4:
        raise InvalidInput("need at least 4 scales")
    q = np.array(R_list[1:]) / np.array(R_list[:-1])
    if np.any(q <= 1) or not np.allclose(q, q[0], rtol=1e-9):
        raise InvalidInput("scales must form an increasing geometric progression")

    per_r = [int(trials)] * len(R_list) if np.ndim(trials) == 0 else [int(x) for x in trials]
    if len(per_r) != len(R_list):
        raise InvalidInput("give one trial count per scale")

    def run(k):
        ests = []
        for R, n in zip(R_list, per_r):
            t = build_target(k, R, epsilon, d=config.d, level=level)
            cfg = coverage_config(t, config.lam, config.r, config.dt, config.horizon, seed=config.seed)
            ests.append(estimate_cover_time(t, cfg, n, threads=threads))
        return ests, t.dimension

    ests, alpha = run(kind)
    means = np.array([e.mean for e in ests])
    rate = rate_function(config.d, alpha, config.lam, config.r, R_list)
    fit_rate = linear_fit(rate, means)
    fit_log = linear_fit(np.log(R_list), means)
    study = ScalingStudy(SetKind(kind).value, R_list, ests, fit_rate, fit_log)
    if compare_kind is not None:
        comp, _ = run(compare_kind)
        a, b = ests[-1], comp[-1]
        study.compare_kind = SetKind(compare_kind).value
        study.compare = comp
        if b.mean > 0 and a.mean > 0:
            study.ratio = a.mean / b.mean
            study.ratio_se = study.ratio * math.hypot(a.std_error / a.mean, b.std_error / b.mean)
        else:
            # covered at t=0 in every trial: no finite ratio
            study.ratio = math.inf if a.mean > 0 else math.nan
            study.ratio_se = math.nan
    return study
