"""Percolation time through the crossing-component proxy, cell density, and the thinning coupling.

Time is observed at integer steps.  The infinite component is replaced by the
crossing component of the cube Q_L; the coupling makes a fresh Poisson
process a subset of the nodes after they have moved for a time Delta.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gamma

from .core import rng as streams
from .core.config import DomainSpec, InvalidInput, SimConfig
from .core.motion import Trajectory, WindowedNodes
from .core.parallel import map_trials
from .core.points import NodeEnsemble
from .core.stats import TailCurve, tail_from_steps
from .graph import build_graph, crossing_component

# critical filling factor lam * vol(B(0, r/2)) of the Boolean model (literature values)
FILLING_C = {2: 1.1281, 3: 0.3418}


def _steps_per_unit(dt: float) -> int:
    k = int(round(1.0 / dt))
    if k < 1 or abs(k * dt - 1.0) > 1e-9:
        raise InvalidInput("dt must divide 1 (observations happen at integer times)")
    return k


# ---------------------------------------------------------------- crossing proxy


@dataclass(frozen=True)
class PercTrial:
    config: SimConfig
    proxy_side: float
    perc_at: int | None
    censored: bool

    def __post_init__(self):
        if (self.perc_at is None) != self.censored:
            raise InvalidInput("a trial either percolates or is censored")


@dataclass(frozen=True)
class LambdaCEstimate:
    median: float
    lo: float
    hi: float
    samples: np.ndarray = field(repr=False)
    d: int = 2
    r: float = 1.0
    side: float = 30.0


_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def guess_lambda_c(d: int, r: float) -> float:
    if d not in FILLING_C:
        raise InvalidInput("lambda_c is calibrated for d in {2, 3}")
    return FILLING_C[d] / (math.pi ** (d / 2) / gamma(d / 2 + 1) * (r / 2) ** d)


def _crossing_rank(pos: np.ndarray, r: float, side: float) -> int | None:
    """Smallest k such that the first k points cross Q_side (None if all of them do not)."""
    n = len(pos)

    def crosses(k):
        return k > 0 and crossing_component(build_graph(pos[:k], r), side).exists

    if not crosses(n):
        return None
    lo, hi = 0, n  # crosses(lo) false, crosses(hi) true
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if crosses(mid):
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_lambda_c(
    d: int,
    r: float,
    side: float,
    trials: int,
    *,
    seed: int = 0,
    lam_max: float | None = None,
    boot: int = 2000,
    level: float = 0.95,
    threads: int | None = None,
) -> LambdaCEstimate:
    """Intensity at which Q_side is crossed with probability 1/2, with a bootstrap interval.

    Each sample places Poisson(lam_max) points with uniform marks; adding
    points in mark order can only merge components, so the sample's critical
    intensity lam_max * mark_(k*) follows from a bisection on k.  The median
    of these is the estimate.  Results are cached per argument tuple.
    """
    if d not in (2, 3):
        raise InvalidInput("calibration supports d in {2, 3}")
    lam_max = 4 * guess_lambda_c(d, r) if lam_max is None else float(lam_max)
    key = (d, float(r), float(side), int(trials), int(seed), lam_max, boot, level)
    with _CACHE_LOCK:
        if key in _CACHE:
            return _CACHE[key]
    half = side / 2

    def run(trial):
        g = streams.stream(seed, trial, streams.AUX)
        n = g.poisson(lam_max * side**d)
        pos = g.uniform(-half, half, (n, d))
        marks = g.random(n)
        order = np.argsort(marks)
        k = _crossing_rank(pos[order], r, side)
        return math.inf if k is None else lam_max * marks[order][k - 1]

    samples = np.array(map_trials(run, trials, threads))
    med = float(np.median(samples))
    g = streams.stream(seed, 0, streams.AUX, 1)
    bs = np.median(g.choice(samples, (boot, len(samples)), replace=True), axis=1)
    a = (1 - level) / 2
    est = LambdaCEstimate(med, float(np.quantile(bs, a)), float(np.quantile(bs, 1 - a)), samples, d, float(r), float(side))
    with _CACHE_LOCK:
        _CACHE.setdefault(key, est)
        _CACHE.setdefault(("latest", d, float(r)), est)
    return est


def cached_lambda_c(d: int, r: float) -> LambdaCEstimate | None:
    """Most recent calibration for (d, r), if any."""
    with _CACHE_LOCK:
        return _CACHE.get(("latest", d, float(r)))


def crossing_probability(d: int, r: float, side: float, lam: float, trials: int, *, seed: int = 0) -> float:
    """Fraction of samples in which Poisson(lam) points in Q_side have a crossing component."""
    half = side / 2
    hits = 0
    for trial in range(trials):
        g = streams.stream(seed, trial, streams.AUX)
        pos = g.uniform(-half, half, (g.poisson(lam * side**d), d))
        hits += bool(len(pos)) and crossing_component(build_graph(pos, r), side).exists
    return hits / trials


def warn_if_subcritical(lam: float, d: int, r: float, margin: float = 0.0) -> bool:
    est = cached_lambda_c(d, r)
    ref = est.hi if est is not None else guess_lambda_c(d, r)
    if lam < ref + margin:
        warnings.warn(
            f"lam={lam:g} is not above the critical intensity ~{ref:.3g}; the crossing proxy is meaningless",
            RuntimeWarning,
            stacklevel=3,
        )
        return True
    return False


def perc_config(lam: float, r: float, d: int, side: float, horizon: int, *, dt: float = 1.0, seed: int = 0) -> SimConfig:
    return SimConfig(lam, r, d, dt, float(horizon), DomainSpec.boxed_for(side, r, horizon), seed)


def _perc_trial(config, side, target, levels, trial) -> np.ndarray:
    d, n = config.d, config.n_steps
    k = _steps_per_unit(config.dt)
    out = np.full(len(levels), -1, dtype=np.int64)
    if config.lam == 0:
        return out
    half = side / 2
    fracs = np.array([lv / config.lam for lv in levels])
    u = target.sample(np.arange(n // k + 1, dtype=float), d, streams.stream(config.seed, trial, streams.TARGET))
    lo, hi = config.domain.bounds(d)
    nodes = WindowedNodes(
        config.lam, lo, hi, np.full(d, -half), np.full(d, half), config.dt, n,
        streams.stream(config.seed, trial, streams.NODES),
    )

    def observe(i, pos, marks):
        ok = ~np.isnan(pos[:, 0]) & np.all(np.abs(pos) <= half, axis=1)
        for j, f in enumerate(fracs):
            if out[j] >= 0:
                continue
            sel = pos[ok & (marks < f)]
            if not len(sel):
                continue
            g = build_graph(sel, config.r)
            rep = crossing_component(g, side)
            if not rep.exists:
                continue
            near = np.sum((sel - u[i]) ** 2, axis=1) <= config.r**2
            if np.any(g.labels[near] == rep.component_id):
                out[j] = i

    observe(0, nodes.positions, nodes.marks)
    while nodes.step < n and np.any(out < 0):
        m = min(nodes.block_size(), n - nodes.step)
        steps, paths, _, marks = nodes.advance_block(m)
        for row in np.flatnonzero(steps % k == 0):
            observe(int(steps[row] // k), paths[row], marks)
    return out


def perc_steps(
    config: SimConfig,
    proxy_side: float,
    trials: int,
    *,
    target: Trajectory | None = None,
    levels=None,
    threads: int | None = None,
) -> np.ndarray:
    """First integer time u is within r of the crossing component of Q_L; shape (trials, levels)."""
    target = Trajectory.stationary() if target is None else target
    levels = [config.lam] if levels is None else [float(x) for x in levels]
    if config.domain.is_torus:
        raise InvalidInput("the crossing proxy runs on a boxed plane")
    if config.domain.side + 1e-12 < proxy_side:
        raise InvalidInput("window must contain Q_L")
    config.check_buffer()
    _steps_per_unit(config.dt)
    if config.lam > 0 and config.d in FILLING_C:
        warn_if_subcritical(min(levels), config.d, config.r)
    res = map_trials(lambda tr: _perc_trial(config, proxy_side, target, levels, tr), trials, threads)
    return np.stack(res) if res else np.empty((0, len(levels)), np.int64)


def estimate_perc_tail(
    config: SimConfig,
    proxy_side: float,
    trials: int,
    horizon: int | None = None,
    *,
    target: Trajectory | None = None,
    threads: int | None = None,
) -> TailCurve:
    """Survival P[T_perc > t] on the integer grid 0..horizon (crossing proxy)."""
    if horizon is not None:
        config = config.with_(horizon=float(horizon))
    steps = perc_steps(config, proxy_side, trials, target=target, threads=threads)[:, 0]
    return tail_from_steps(steps, int(round(config.horizon)), 1.0)


def perc_trials(config, proxy_side, trials, *, target=None, threads=None) -> list:
    steps = perc_steps(config, proxy_side, trials, target=target, threads=threads)[:, 0]
    return [PercTrial(config, proxy_side, None if s < 0 else int(s), bool(s < 0)) for s in steps]


# ---------------------------------------------------------------- density


@dataclass(frozen=True)
class Tessellation:
    cube_side: float
    cell_side: float
    threshold: int
    xi: float = 0.0

    def __post_init__(self):
        m = self.cube_side / self.cell_side
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise InvalidInput("cube side must be an integer multiple of the cell side")
        if self.threshold < 1:
            raise InvalidInput("threshold must be >= 1")
        if not 0 <= self.xi < 1:
            raise InvalidInput("xi must lie in [0, 1)")

    @classmethod
    def for_intensity(cls, cube_side: float, cell_side: float, xi: float, lam: float, d: int) -> "Tessellation":
        """Threshold ceil((1 - xi) lam ell^d), at least 1."""
        thr = max(1, math.ceil((1 - xi) * lam * cell_side**d - 1e-9))
        return cls(float(cube_side), float(cell_side), int(thr), float(xi))

    @property
    def cells_per_side(self) -> int:
        return int(round(self.cube_side / self.cell_side))

    def cell_counts(self, pos: np.ndarray) -> np.ndarray:
        """Node counts per cell (flattened, C order) for nodes inside Q_K."""
        m = self.cells_per_side
        d = pos.shape[1]
        half = self.cube_side / 2
        ok = ~np.isnan(pos[:, 0]) & np.all(np.abs(pos) <= half, axis=1)
        idx = np.clip(np.floor((pos[ok] + half) / self.cell_side).astype(np.int64), 0, m - 1)
        flat = np.ravel_multi_index(idx.T, (m,) * d) if len(idx) else np.empty(0, np.int64)
        return np.bincount(flat, minlength=m**d)


@dataclass
class DensityReport:
    fraction: float
    dense: np.ndarray  # per integer time 0..t-1
    min_occupancy: np.ndarray
    tess: Tessellation


def density_config(lam: float, d: int, tess: Tessellation, t: int, *, seed: int = 0, r: float = 1.0) -> SimConfig:
    return SimConfig(lam, r, d, 1.0, float(t), DomainSpec.boxed_for(tess.cube_side, r, t), seed)


def density_fraction(config: SimConfig, tess: Tessellation, t: int, *, trial: int = 0) -> DensityReport:
    """Fraction of integer times i in 0..t-1 at which every cell of Q_K holds >= threshold nodes."""
    t = int(t)
    if t < 1:
        raise InvalidInput("t must be a positive integer")
    k = _steps_per_unit(config.dt)
    if config.horizon + 1e-9 < t - 1:
        raise InvalidInput("config horizon shorter than t - 1")
    config.check_buffer(horizon=t - 1)
    d = config.d
    dense = np.zeros(t, dtype=bool)
    min_occ = np.zeros(t, dtype=np.int64)
    if config.lam == 0:
        return DensityReport(0.0, dense, min_occ, tess)
    half = tess.cube_side / 2
    lo, hi = config.domain.bounds(d)
    n = (t - 1) * k
    nodes = WindowedNodes(
        config.lam, lo, hi, np.full(d, -half), np.full(d, half), config.dt, n,
        streams.stream(config.seed, trial, streams.NODES),
    )

    def observe(i, pos):
        c = tess.cell_counts(pos)
        min_occ[i] = c.min()
        dense[i] = min_occ[i] >= tess.threshold

    observe(0, nodes.positions)
    while nodes.step < n:
        steps, paths, _, _ = nodes.advance_block(nodes.block_size())
        for row in np.flatnonzero(steps % k == 0):
            observe(int(steps[row] // k), paths[row])
    return DensityReport(float(dense.mean()), dense, min_occ, tess)


# ---------------------------------------------------------------- coupling


def _sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / gamma(d / 2)


def _g_radial(s, d, rho, Delta):
    """Radial density of the mass of g: S_{d-1} s^{d-1} g(s)."""
    return _sphere_area(d) * s ** (d - 1) * (2 * math.pi * Delta) ** (-d / 2) * np.exp(-((s + rho) ** 2) / (2 * Delta))


def g_mass(d: int, rho: float, Delta: float, R: float = math.inf) -> float:
    """Integral of g over the ball B(0, R) by adaptive radial quadrature."""
    upper = R if math.isfinite(R) else rho + 40 * math.sqrt(Delta)
    upper = min(upper, rho + 40 * math.sqrt(Delta))
    val, _ = integrate.quad(
        _g_radial, 0.0, upper, args=(d, rho, Delta), epsabs=0.0, epsrel=1e-12, limit=400,
        points=[min(upper, math.sqrt(Delta))],
    )
    return float(val)


def lemma_radius(d: int, eps: float, Delta: float) -> float:
    """R = 2 sqrt(d Delta log(8 d / eps))."""
    return 2 * math.sqrt(d * Delta * math.log(8 * d / eps))


def lemma_delta(d: int, eps: float, rho: float) -> float:
    """Delta = 16 d^2 rho^2 / eps^2."""
    return 16 * d * d * rho * rho / (eps * eps)


@dataclass(frozen=True)
class PsiBound:
    value: float
    bound: float
    applicable: bool
    passed: bool | None
    note: str = ""


def check_psi_bound(d: int, eps: float, rho: float, Delta: float, R: float) -> PsiBound:
    """Integrate g over B(0, R) and compare with 1 - eps/2 when the hypotheses hold."""
    if not 0 < eps < 1 or rho <= 0 or Delta <= 0 or R <= 0:
        raise InvalidInput("need eps in (0,1) and rho, Delta, R > 0")
    value = g_mass(d, rho, Delta, R)
    bound = 1 - eps / 2
    tol = 1e-9
    ok_delta = Delta >= lemma_delta(d, eps, rho) * (1 - tol)
    ok_r = R >= lemma_radius(d, eps, Delta) * (1 - tol)
    if not (ok_delta and ok_r):
        miss = [s for s, ok in (("Delta", ok_delta), ("R", ok_r)) if not ok]
        return PsiBound(value, bound, False, None, "bound not applicable: " + ", ".join(miss) + " below requirement")
    return PsiBound(value, bound, True, value >= bound)


@dataclass(frozen=True)
class CouplingSpec:
    K: float
    K_prime: float
    ell: float
    beta: float
    eps: float
    Delta: float
    d: int = 2
    rho: float | None = None

    def __post_init__(self):
        if self.rho is None:
            object.__setattr__(self, "rho", math.sqrt(self.d) * self.ell)
        if not 0 < self.eps < 1:
            raise InvalidInput("eps must lie in (0, 1)")
        if self.beta < 0 or self.ell <= 0:
            raise InvalidInput("beta must be >= 0 and ell > 0")
        m = self.K / self.ell
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise InvalidInput("K must be an integer multiple of ell")
        need = 16 * self.d**2 * self.ell**2 / self.eps**2
        if self.Delta < need * (1 - 1e-12):
            raise InvalidInput(f"Delta={self.Delta:g} below 16 d^2 ell^2 / eps^2 = {need:g}")
        kmax = self.K - 2 * lemma_radius(self.d, self.eps, self.Delta)
        if self.K_prime > kmax + 1e-9:
            raise InvalidInput(f"K'={self.K_prime:g} exceeds K - 2R = {kmax:.4g}")
        if not self.K_prime > 0:
            raise InvalidInput("K' must be > 0")

    @classmethod
    def smallest(cls, d: int, ell: float, beta: float, eps: float, K_prime: float) -> "CouplingSpec":
        """Smallest Delta and K (a multiple of ell) allowed for the requested K'."""
        Delta = 16 * d * d * ell * ell / (eps * eps)
        K = ell * math.ceil((K_prime + 2 * lemma_radius(d, eps, Delta)) / ell - 1e-12)
        return cls(K, K_prime, ell, beta, eps, Delta, d)

    @property
    def cells_per_side(self) -> int:
        return int(round(self.K / self.ell))

    @property
    def n_cells(self) -> int:
        return self.cells_per_side**self.d

    def psi(self) -> float:
        return 1 - g_mass(self.d, self.rho, self.Delta)


def _cell_index(pos: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Flat cell index of each point of Q_K (-1 outside)."""
    m, half = spec.cells_per_side, spec.K / 2
    inside = np.all(np.abs(pos) <= half, axis=1)
    idx = np.clip(np.floor((pos + half) / spec.ell).astype(np.int64), 0, m - 1)
    flat = np.ravel_multi_index(idx.T, (m,) * spec.d) if len(pos) else np.empty(0, np.int64)
    return np.where(inside, flat, -1)


def dense_phi0(spec: CouplingSpec, lam: float | None = None, *, seed: int = 0, trial: int = 0) -> NodeEnsemble:
    """Initial configuration on Q_K with at least beta ell^d nodes per cell.

    With ``lam`` None every cell holds exactly ceil(beta ell^d) uniform nodes;
    otherwise cells hold Poisson(lam ell^d) nodes conditioned on reaching that
    floor (cells are independent, so per-cell rejection is exact).
    """
    g = streams.stream(seed, trial, streams.COUPLING, 1)
    d, m, ell = spec.d, spec.cells_per_side, spec.ell
    floor = math.ceil(spec.beta * ell**d - 1e-9)
    nc = spec.n_cells
    if lam is None:
        counts = np.full(nc, floor, dtype=np.int64)
    else:
        counts = g.poisson(lam * ell**d, nc)
        bad = np.flatnonzero(counts < floor)
        while len(bad):
            counts[bad] = g.poisson(lam * ell**d, len(bad))
            bad = bad[counts[bad] < floor]
    cell = np.repeat(np.arange(nc), counts)
    corner = np.stack(np.unravel_index(cell, (m,) * d), axis=1) * ell - spec.K / 2
    pos = corner + ell * g.random((len(cell), d))
    return NodeEnsemble(0.0, pos, np.arange(len(pos)), (seed, trial, 0))


def _sample_g(rng, n: int, d: int, rho: float, Delta: float) -> np.ndarray:
    """Draws from g / (1 - psi): accept Z ~ N(0, Delta I) with probability exp(-|Z| rho / Delta)."""
    out = np.empty((n, d))
    todo = np.arange(n)
    sd = math.sqrt(Delta)
    while len(todo):
        z = sd * rng.standard_normal((len(todo), d))
        acc = rng.random(len(todo)) < np.exp(-np.linalg.norm(z, axis=1) * rho / Delta)
        out[todo[acc]] = z[acc]
        todo = todo[~acc]
    return out


def _log_gauss(x: np.ndarray, Delta: float) -> np.ndarray:
    d = x.shape[1]
    return -0.5 * d * math.log(2 * math.pi * Delta) - np.sum(x * x, axis=1) / (2 * Delta)


def _log_g(x: np.ndarray, rho: float, Delta: float) -> np.ndarray:
    d = x.shape[1]
    return -0.5 * d * math.log(2 * math.pi * Delta) - (np.linalg.norm(x, axis=1) + rho) ** 2 / (2 * Delta)


def _sample_residual(rng, y: np.ndarray, yp: np.ndarray, rho: float, Delta: float) -> np.ndarray:
    """Endpoints x with density (phi_Delta(x - y) - g(x - y')) / psi, by rejection from N(y, Delta I)."""
    n, d = y.shape
    out = np.empty((n, d))
    todo = np.arange(n)
    sd = math.sqrt(Delta)
    while len(todo):
        x = y[todo] + sd * rng.standard_normal((len(todo), d))
        ratio = np.exp(_log_g(x - yp[todo], rho, Delta) - _log_gauss(x - y[todo], Delta))
        acc = rng.random(len(todo)) >= ratio
        out[todo[acc]] = x[acc]
        todo = todo[~acc]
    return out


class _RadialCDF:
    """F(T) = mass of g inside B(0, T), tabulated for fast interpolation."""

    def __init__(self, d, rho, Delta, n=20001):
        self.top = rho + 40 * math.sqrt(Delta)
        s = np.linspace(0.0, self.top, n)
        f = _g_radial(s, d, rho, Delta)
        self.s = s
        self.F = integrate.cumulative_simpson(f, x=s, initial=0.0)

    def __call__(self, T):
        return np.interp(T, self.s, self.F)


def _directions(d: int, m: int = 4096) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = 2 * math.pi * (np.arange(m) + 0.5) / m
        return np.c_[np.cos(a), np.sin(a)]
    if d == 3:
        i = np.arange(m) + 0.5
        z = 1 - 2 * i / m
        phi = math.pi * (1 + math.sqrt(5)) * i
        w = np.sqrt(1 - z * z)
        return np.c_[w * np.cos(phi), w * np.sin(phi), z]
    u = streams.stream(0, 0, streams.AUX, d).standard_normal((m, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def box_mass(points: np.ndarray, half: float, cdf: _RadialCDF, dirs: np.ndarray) -> np.ndarray:
    """Integral of g over the box Q_{2 half} - z for each row z (z inside the box)."""
    z = np.atleast_2d(points)
    out = np.empty(len(z))
    with np.errstate(divide="ignore", invalid="ignore"):
        for s in range(0, len(z), 256):
            zz = z[s : s + 256]
            lo = (-half - zz)[:, None, :]
            hi = (half - zz)[:, None, :]
            u = dirs[None, :, :]
            t = np.where(u > 0, hi / u, np.where(u < 0, lo / u, np.inf))
            exit_dist = t.min(axis=2)
            out[s : s + 256] = cdf(exit_dist).mean(axis=1)
    return out


@dataclass
class CouplingResult:
    xi: NodeEnsemble
    success: bool
    phi_delta: np.ndarray = field(repr=False)
    diagnostics: dict = field(default_factory=dict)


def run_coupling(spec: CouplingSpec, phi0, *, seed: int = 0, trial: int = 0, check_floor: bool = True) -> CouplingResult:
    """Three-stage coupling of a Poisson((1-eps) beta) process Xi with Phi_Delta.

    (i) Xi_0 ~ Poisson((1 - eps/2) beta) on Q_K; success iff every cell has no
    more Xi_0 nodes than Phi_0 nodes.  (ii) Xi_0 nodes are paired with distinct
    Phi_0 nodes of their cell; with probability 1 - psi a pair jumps jointly by
    Z ~ g / (1 - psi), otherwise the Xi_0 node is deleted and its partner
    moves by the residual density, so Phi_Delta is exactly Brownian.  Other
    Phi_0 nodes move by N(0, Delta I).  (iii) surviving pairs landing in
    Q_{K'} are kept with probability (1 - eps) beta / mu(z), mu being the
    exact intensity of the survivors; Xi is what remains.
    """
    pos0 = np.asarray(phi0.positions if isinstance(phi0, NodeEnsemble) else phi0, float)
    d = spec.d
    if pos0.ndim != 2 or pos0.shape[1] != d:
        raise InvalidInput("phi0 has the wrong dimension")
    cell_phi = _cell_index(pos0, spec)
    nc = spec.n_cells
    cnt_phi = np.bincount(cell_phi[cell_phi >= 0], minlength=nc)
    floor = spec.beta * spec.ell**d
    if check_floor and np.any(cnt_phi < floor - 1e-9):
        raise InvalidInput("phi0 must hold at least beta ell^d nodes in every cell")
    g = streams.stream(seed, trial, streams.COUPLING)
    half = spec.K / 2
    rho, Delta = spec.rho, spec.Delta
    psi = spec.psi()

    # (i)
    lam0 = (1 - spec.eps / 2) * spec.beta
    xi0 = g.uniform(-half, half, (g.poisson(lam0 * spec.K**d), d))
    cell_xi = _cell_index(xi0, spec)
    cnt_xi = np.bincount(cell_xi, minlength=nc)
    success1 = bool(np.all(cnt_xi <= cnt_phi))

    # (ii) pair the j-th Xi_0 node of a cell with the j-th Phi_0 node of that cell (random order)
    def rank_in_cell(cells, rand):
        order = np.lexsort((rand, cells))
        sc = cells[order]
        start = np.r_[0, np.flatnonzero(sc[1:] != sc[:-1]) + 1]
        rank = np.empty(len(cells), np.int64)
        rank[order] = np.arange(len(cells)) - np.repeat(start, np.diff(np.r_[start, len(cells)]))
        return rank

    rank_xi = rank_in_cell(cell_xi, g.random(len(xi0)))
    ids_in = np.flatnonzero(cell_phi >= 0)
    rank_phi = np.full(len(pos0), -1, np.int64)
    rank_phi[ids_in] = rank_in_cell(cell_phi[ids_in], g.random(len(ids_in)))
    stride = max(int(cnt_phi.max(initial=0)), int(cnt_xi.max(initial=0))) + 1
    key_phi = cell_phi[ids_in] * stride + rank_phi[ids_in]
    order = np.argsort(key_phi)
    key_xi = cell_xi * stride + rank_xi
    at = np.clip(np.searchsorted(key_phi[order], key_xi), 0, max(len(order) - 1, 0))
    partner = np.full(len(xi0), -1, np.int64)
    if len(order):
        hit = key_phi[order][at] == key_xi
        partner[hit] = ids_in[order][at[hit]]
    paired = partner >= 0

    joint = paired & (g.random(len(xi0)) < 1 - psi)
    unpaired_keep = ~paired & (g.random(len(xi0)) < 1 - psi)
    thinned = paired & ~joint

    phi_delta = pos0 + math.sqrt(Delta) * g.standard_normal(pos0.shape)
    z = _sample_g(g, int(joint.sum()), d, rho, Delta)
    land = xi0[joint] + z
    phi_delta[partner[joint]] = land
    if thinned.any():
        phi_delta[partner[thinned]] = _sample_residual(g, pos0[partner[thinned]], xi0[thinned], rho, Delta)
    # unpaired Xi_0 nodes (only when (i) failed) move alone and cannot be in Phi_Delta
    alone = xi0[unpaired_keep] + _sample_g(g, int(unpaired_keep.sum()), d, rho, Delta)

    # (iii)
    survivors = np.concatenate([land, alone])
    from_pair = np.r_[np.ones(len(land), bool), np.zeros(len(alone), bool)]
    hp = spec.K_prime / 2
    inner = np.all(np.abs(survivors) <= hp, axis=1)
    cdf = _RadialCDF(d, rho, Delta)
    mu = lam0 * box_mass(survivors[inner], half, cdf, _directions(d))
    target = (1 - spec.eps) * spec.beta
    accept_p = np.ones(0) if not len(mu) else target / mu
    feasible = bool(np.all(accept_p <= 1 + 1e-12))
    keep = np.zeros(len(survivors), bool)
    keep[np.flatnonzero(inner)] = g.random(len(mu)) < accept_p
    xi = survivors[keep]
    xi_paired = from_pair[keep]

    # subset check by exact coordinates
    in_inner = np.all(np.abs(phi_delta) <= hp, axis=1)
    have = {row.tobytes() for row in phi_delta[in_inner]}
    subset = bool(all(row.tobytes() in have for row in xi))
    success = success1 and feasible
    diag = {
        "success_pairing": success1,
        "mu_feasible": feasible,
        "subset_exact": subset,
        "psi": psi,
        "paired": int(paired.sum()),
        "thinned": int(thinned.sum()),
        "psi_empirical": float(thinned.sum() / paired.sum()) if paired.any() else math.nan,
        "xi0_count": len(xi0),
        "xi_count": len(xi),
        "xi_unpaired": int((~xi_paired).sum()),
        "mu_min": float(mu.min()) if len(mu) else math.nan,
        "mu_max": float(mu.max()) if len(mu) else math.nan,
        "cell_counts_phi0": cnt_phi,
        "cell_counts_xi0": cnt_xi,
    }
    ens = NodeEnsemble(spec.Delta, xi, np.arange(len(xi)), (seed, trial, 0))
    return CouplingResult(ens, success, phi_delta, diag)


def subbox_counts(points: np.ndarray, side: float, m: int) -> np.ndarray:
    """Counts in the m^d congruent sub-boxes of Q_side (flattened)."""
    d = points.shape[1] if points.ndim == 2 else 1
    half = side / 2
    ok = np.all(np.abs(points) <= half, axis=1)
    idx = np.clip(np.floor((points[ok] + half) / (side / m)).astype(np.int64), 0, m - 1)
    flat = np.ravel_multi_index(idx.T, (m,) * d) if len(idx) else np.empty(0, np.int64)
    return np.bincount(flat, minlength=m**d)


@dataclass
class CouplingStats:
    runs: int
    success_rate: float
    subset_all: bool
    mean_z: float
    var_z: float
    corr: float
    corr_bound: float
    psi: float
    psi_empirical: float
    psi_z: float

    @property
    def passed(self) -> bool:
        return (
            self.subset_all
            and abs(self.mean_z) <= 3
            and abs(self.var_z) <= 3
            and abs(self.corr) < self.corr_bound
            and abs(self.psi_z) <= 3
        )


def coupling_study(spec: CouplingSpec, runs: int, *, lam: float | None = None, seed: int = 0, boxes: int = 4) -> CouplingStats:
    """Repeat the coupling with fresh Phi_0 and test Xi on Q_{K'}.

    Xi counts over ``boxes``^d sub-boxes are tested against Poisson((1-eps)
    beta vol) (mean and variance z-scores) and correlated with the Phi_0
    counts of the same sub-boxes.
    """
    xs, ps, succ, subset = [], [], [], True
    paired = thinned = 0
    for trial in range(runs):
        phi0 = dense_phi0(spec, lam, seed=seed, trial=trial)
        res = run_coupling(spec, phi0, seed=seed, trial=trial)
        succ.append(res.success)
        paired += res.diagnostics["paired"]
        thinned += res.diagnostics["thinned"]
        if res.success:
            subset &= res.diagnostics["subset_exact"]
            xs.append(subbox_counts(res.xi.positions, spec.K_prime, boxes))
            ps.append(subbox_counts(np.asarray(phi0.positions), spec.K_prime, boxes))
    mean_pois = (1 - spec.eps) * spec.beta * (spec.K_prime / boxes) ** spec.d
    psi = spec.psi()
    pe = thinned / paired if paired else math.nan
    psi_z = (pe - psi) / math.sqrt(psi * (1 - psi) / paired) if paired else math.nan
    if not xs:
        return CouplingStats(runs, 0.0, False, math.nan, math.nan, math.nan, 0.0, psi, pe, psi_z)
    x = np.concatenate(xs).astype(float)
    p = np.concatenate(ps).astype(float)
    n = len(x)
    mean_z = (x.mean() - mean_pois) / math.sqrt(mean_pois / n)
    var_z = (x.var(ddof=1) - mean_pois) / math.sqrt((mean_pois + 2 * mean_pois**2) / n)
    corr = float(np.corrcoef(x, p)[0, 1]) if x.std() > 0 and p.std() > 0 else 0.0
    return CouplingStats(
        runs, float(np.mean(succ)), bool(subset), float(mean_z), float(var_z), corr, 3 / math.sqrt(runs), psi, pe, psi_z
    )
