"""Message broadcast over the mobile graph on a torus of volume n / lam."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import rng as streams
from .core.config import DomainSpec, InvalidInput
from .core.parallel import map_trials
from .core.stats import linear_fit
from .graph import build_graph, giant_components, torus_delta
from .percolation import cached_lambda_c, guess_lambda_c

SUBSTEPS = 10


@dataclass
class BroadcastState:
    informed: np.ndarray
    t: int
    origin: int

    def exchange(self, labels: np.ndarray) -> None:
        """Inform every node sharing a component with an informed node."""
        hit = np.zeros(labels.max() + 1 if len(labels) else 0, dtype=bool)
        hit[labels[self.informed]] = True
        self.informed = hit[labels]

    @property
    def done(self) -> bool:
        return bool(self.informed.all())


@dataclass
class BroadcastTrial:
    steps: int | None  # T_broad; None if max_steps ran out
    nodes: int
    resampled: int
    giant_pairs: int  # consecutive steps both holding a giant component
    giant_overlaps: int  # ... whose giants share a node


def _giant_members(graph) -> np.ndarray:
    ids = giant_components(graph)
    if not len(ids):
        return np.empty(0, np.int64)
    return np.flatnonzero(np.isin(graph.labels, ids))


def broadcast_trial(
    n: float,
    lam: float,
    r: float,
    d: int,
    *,
    seed: int = 0,
    trial: int = 0,
    max_steps: int = 1000,
    substeps: int = SUBSTEPS,
    track_giant: bool = True,
    max_resample: int = 1000,
) -> BroadcastTrial:
    side = DomainSpec.torus_for_count(n, lam, d).side
    resampled = 0
    while True:
        g = streams.stream(seed, trial, streams.NODES, resampled)
        count = g.poisson(n)
        if count > 0:
            break
        resampled += 1
        if resampled > max_resample:
            raise InvalidInput("no nodes sampled; n is too small")
    pos = g.uniform(0.0, side, (count, d))
    center = np.full(d, side / 2)
    origin = int(np.argmin(np.sum(torus_delta(pos, center, side) ** 2, axis=1)))
    state = BroadcastState(np.zeros(count, dtype=bool), 0, origin)
    state.informed[origin] = True
    motion = streams.stream(seed, trial, streams.MOTION)
    sd = math.sqrt(1.0 / substeps)
    pairs = overlaps = 0
    prev_giant = None
    for i in range(max_steps + 1):
        if i > 0:
            for _ in range(substeps):
                pos = np.mod(pos + sd * motion.standard_normal(pos.shape), side)
            # mod can round up to exactly side
            pos[pos >= side] = 0.0
        graph = build_graph(pos, r, torus_side=side)
        state.t = i
        state.exchange(graph.labels)
        if track_giant:
            giant = _giant_members(graph)
            if prev_giant is not None and len(prev_giant) and len(giant):
                pairs += 1
                overlaps += bool(np.intersect1d(prev_giant, giant, assume_unique=True).size)
            prev_giant = giant
        if state.done:
            return BroadcastTrial(i, count, resampled, pairs, overlaps)
    return BroadcastTrial(None, count, resampled, pairs, overlaps)


@dataclass
class BroadcastResult:
    n: float
    lam: float
    times: np.ndarray  # T_broad of finished trials (trial order)
    unfinished: int
    trials: list = field(repr=False)

    @property
    def all_finished(self) -> bool:
        return self.unfinished == 0

    @property
    def median(self) -> float:
        return float(np.median(self.times)) if len(self.times) else math.nan

    @property
    def giant_pairs(self) -> int:
        return sum(t.giant_pairs for t in self.trials)

    @property
    def giant_overlap_rate(self) -> float:
        p = self.giant_pairs
        return sum(t.giant_overlaps for t in self.trials) / p if p else math.nan

    @property
    def resampled(self) -> int:
        return sum(t.resampled for t in self.trials)

    def median_se(self, boot: int = 2000, seed: int = 0) -> float:
        if len(self.times) < 2:
            return math.nan
        g = streams.stream(seed, 0, streams.AUX, 2)
        bs = np.median(g.choice(self.times, (boot, len(self.times)), replace=True), axis=1)
        return float(bs.std(ddof=1))


def _gate(lam: float, d: int, r: float, lambda_c: float | None) -> None:
    if lambda_c is None:
        est = cached_lambda_c(d, r)
        lambda_c = est.hi if est is not None else guess_lambda_c(d, r)
    if lam <= lambda_c:
        warnings.warn(f"lam={lam:g} is not above the critical intensity ~{lambda_c:.3g}", RuntimeWarning, stacklevel=3)
        raise InvalidInput(f"broadcast needs a supercritical intensity (lam > {lambda_c:.3g})")


def simulate_broadcast(
    n: float,
    lam: float,
    r: float,
    d: int,
    trials: int,
    *,
    seed: int = 0,
    max_steps: int = 1000,
    lambda_c: float | None = None,
    track_giant: bool = True,
    threads: int | None = None,
) -> BroadcastResult:
    """Sample T_broad: first integer step after whose exchange every node is informed.

    The origin's component is informed at step 0 before any motion.  Between
    integer steps nodes move by Brownian motion in ``SUBSTEPS`` wrapped increments.
    """
    if not n > 0 or not r > 0:
        raise InvalidInput("n and r must be > 0")
    _gate(lam, d, r, lambda_c)
    res = map_trials(
        lambda tr: broadcast_trial(n, lam, r, d, seed=seed, trial=tr, max_steps=max_steps, track_giant=track_giant),
        trials,
        threads,
    )
    times = np.array([t.steps for t in res if t.steps is not None], dtype=float)
    return BroadcastResult(n, lam, times, sum(t.steps is None for t in res), res)


@dataclass
class BroadcastStudy:
    results: list
    fit: dict  # median T_broad against log n
    sublinear: list  # (n, 4n, median(n), median(4n), se, passed)

    @property
    def passed(self) -> bool:
        return all(row[-1] for row in self.sublinear) if self.sublinear else False

    def rows(self) -> list:
        return [
            {
                "n": r.n,
                "median": r.median,
                "median_se": r.median_se(),
                "mean": float(r.times.mean()) if len(r.times) else math.nan,
                "unfinished": r.unfinished,
                "giant_overlap_rate": r.giant_overlap_rate,
            }
            for r in self.results
        ]


def broadcast_scaling_study(
    n_list,
    lam: float,
    r: float,
    d: int,
    trials: int,
    *,
    seed: int = 0,
    lambda_c: float | None = None,
    max_steps: int = 1000,
    threads: int | None = None,
) -> BroadcastStudy:
    """Median T_broad over a geometric list of n, its fit against log n and the sub-linearity check.

    For every pair (n, 4n) in the list, passes when median(4n) - 2 median(n)
    is at most 3 bootstrap standard errors.
    """
    n_list = [float(x) for x in n_list]
    if len(n_list) < 3:
        raise InvalidInput("need at least 3 values of n")
    q = np.array(n_list[1:]) / np.array(n_list[:-1])
    if np.any(q <= 1) or not np.allclose(q, q[0], rtol=1e-9):
        raise InvalidInput("n values must form an increasing geometric progression")
    _gate(lam, d, r, lambda_c)
    results = [
        simulate_broadcast(n, lam, r, d, trials, seed=seed, max_steps=max_steps, lambda_c=lambda_c, threads=threads)
        for n in n_list
    ]
    meds = np.array([x.median for x in results])
    fit = linear_fit(np.log(n_list), meds)
    checks = []
    for i, a in enumerate(n_list):
        for j, b in enumerate(n_list):
            if math.isclose(b, 4 * a, rel_tol=1e-9):
                se = math.hypot(2 * results[i].median_se(), results[j].median_se())
                diff = results[j].median - 2 * results[i].median
                ok = results[i].all_finished and results[j].all_finished and diff <= 3 * se
                checks.append((a, b, results[i].median, results[j].median, se, bool(ok)))
    return BroadcastStudy(results, fit, checks)
