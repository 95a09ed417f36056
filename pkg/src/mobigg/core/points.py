"""Poisson point sampling, Brownian stepping and the stationarity self-check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams
from .config import InsufficientBuffer, InvalidInput, SimConfig, required_buffer


@dataclass(frozen=True)
class NodeEnsemble:
    """Node positions at one time slice.

    ``lineage`` is (seed, trial, step): the key of the substream that the next
    call to :func:`step_brownian` draws from, so stepping is a pure function.
    Node ``k`` of the array always receives row ``k`` of each increment block;
    ``stream_ids`` records which original node sits in each row.
    """

    time: float
    positions: np.ndarray
    stream_ids: np.ndarray
    lineage: tuple = (0, 0, 0)
    torus_side: float | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2:
            raise InvalidInput("positions must be an (n, d) array")
        ids = np.asarray(self.stream_ids, dtype=np.int64)
        if len(ids) != len(pos):
            raise InvalidInput("positions and stream_ids differ in length")
        pos.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "stream_ids", ids)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def d(self) -> int:
        return self.positions.shape[1]


def box_volume(lo, hi) -> float:
    return float(np.prod(np.asarray(hi, float) - np.asarray(lo, float)))


def uniform_in_box(rng: np.random.Generator, lam: float, lo, hi) -> np.ndarray:
    """Homogeneous Poisson process of intensity ``lam`` on the box [lo, hi]."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    n = rng.poisson(lam * box_volume(lo, hi)) if lam > 0 else 0
    return lo + (hi - lo) * rng.random((n, len(lo)))


def sample_poisson_points(config: SimConfig, lo, hi, *, trial: int = 0) -> NodeEnsemble:
    """Sample Pi_0 restricted to the axis-aligned box [lo, hi].

    The result depends only on (config.seed, trial, region).
    """
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    if lo.shape != (config.d,) or hi.shape != (config.d,):
        raise InvalidInput(f"region corners must have dimension {config.d}")
    if np.any(hi <= lo):
        raise InvalidInput("region must have positive volume")
    dlo, dhi = config.domain.bounds(config.d)
    if np.any(lo < np.asarray(dlo) - 1e-9) or np.any(hi > np.asarray(dhi) + 1e-9):
        raise InvalidInput("region must lie inside the simulated domain")
    key = [float(x) for x in np.concatenate([lo, hi])]
    g = streams.stream(config.seed, trial, streams.NODES, *_float_key(key))
    pos = uniform_in_box(g, config.lam, lo, hi)
    side = config.domain.side if config.domain.is_torus else None
    return NodeEnsemble(0.0, pos, np.arange(len(pos)), (config.seed, trial, 0), side)


def _float_key(values) -> list:
    # Region corners enter the stream key bit-exactly.
    return [int(np.float64(v).view(np.uint64)) for v in values]


def step_brownian(ensemble: NodeEnsemble, dt: float) -> NodeEnsemble:
    """Advance every node by an independent N(0, dt) increment per coordinate."""
    if not dt > 0:
        raise InvalidInput(f"dt must be > 0, got {dt}")
    seed, trial, step = ensemble.lineage
    n, d = ensemble.positions.shape
    if n:
        g = streams.stream(seed, trial, streams.MOTION, step)
        pos = ensemble.positions + math.sqrt(dt) * g.standard_normal((n, d))
        if ensemble.torus_side is not None:
            pos = np.mod(pos, ensemble.torus_side)
            # fmod can round x = -tiny up to exactly side
            pos[pos >= ensemble.torus_side] = 0.0
    else:
        pos = ensemble.positions.copy()
    return NodeEnsemble(
        ensemble.time + dt, pos, ensemble.stream_ids, (seed, trial, step + 1), ensemble.torus_side
    )


@dataclass
class StationarityReport:
    lam: float
    t: float
    probe_volume: float
    reps: int
    mean: float
    variance: float
    z_mean: float
    z_variance: float
    counts: np.ndarray = field(repr=False)

    @property
    def expected(self) -> float:
        return self.lam * self.probe_volume

    @property
    def passed(self) -> bool:
        return abs(self.z_mean) <= 3 and abs(self.z_variance) <= 3


def stationarity_buffer(r: float, t: float, reps: int) -> float:
    return required_buffer(r, t, delta=1.0 / (reps * 1e6))


def stationarity_check(config: SimConfig, t: float, reps: int) -> StationarityReport:
    """Count nodes of Pi_t inside the window and compare with Poisson(lam * vol) moments.

    Nodes start uniform on window + buffer and take one exact N(0, t) step.
    """
    if config.domain.is_torus:
        raise InvalidInput("stationarity_check runs on a BoxedPlane")
    need = stationarity_buffer(config.r, t, reps)
    if config.domain.buffer + 1e-12 < need:
        raise InsufficientBuffer(f"buffer {config.domain.buffer:.4g} < {need:.4g}; counts would be biased low")
    d = config.d
    lo, hi = config.domain.bounds(d)
    wlo, whi = (np.asarray(b) for b in config.domain.window_bounds(d))
    counts = np.empty(reps, dtype=np.int64)
    sd = math.sqrt(t)
    for k in range(reps):
        g = streams.stream(config.seed, k, streams.NODES)
        pos = uniform_in_box(g, config.lam, lo, hi)
        if t > 0 and len(pos):
            pos += sd * g.standard_normal(pos.shape)
        counts[k] = np.count_nonzero(np.all((pos >= wlo) & (pos < whi), axis=1))
    vol = box_volume(wlo, whi)
    mu = config.lam * vol
    m = counts.mean()
    v = counts.var(ddof=1) if reps > 1 else 0.0
    z_mean = (m - mu) / math.sqrt(mu / reps) if mu > 0 else (0.0 if m == 0 else math.inf)
    # Var(s^2) ~ (mu4 - sigma^4)/n with Poisson mu4 = mu + 3 mu^2
    z_var = (v - mu) / math.sqrt((mu + 2 * mu * mu) / reps) if mu > 0 else (0.0 if v == 0 else math.inf)
    return StationarityReport(config.lam, t, vol, reps, float(m), float(v), float(z_mean), float(z_var), counts)
