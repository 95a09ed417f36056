"""Target trajectories and the windowed node process.

:class:`WindowedNodes` simulates a Poisson/Brownian node system on a grid of
times but only tracks nodes that can currently matter for a fixed region of
interest (ROI).  A node whose coordinate k lies a gap g outside the ROI slab
is put to sleep: the continuous first-passage time of that coordinate to the
slab is tau = g^2 / Z^2 with Z ~ N(0, 1) (Levy), so the node is provably
outside the ROI at every grid time before tau.  It wakes at the first grid
time t_w >= tau with coordinate k at (slab edge) + N(0, t_w - tau) and every
other coordinate at x_j + N(0, t_w - t_sleep), which is its exact law by the
strong Markov property and independence of coordinates.  The grid-time
process restricted to the ROI therefore has exactly the same distribution as
brute-force co-evolution of every node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .config import InvalidInput
from .points import uniform_in_box


class MotionKind(str, Enum):
    STATIONARY = "stationary"
    BROWNIAN = "brownian"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class Trajectory:
    """Motion of a target u started at the origin.

    ``path`` (Deterministic only) maps an array of times to an (len(times), d)
    array of positions, e.g. ``lambda t: np.c_[t, 0 * t]``.
    ``variance`` scales a Brownian target: coordinates have variance ``variance * t``.
    """

    kind: MotionKind = MotionKind.STATIONARY
    path: Callable | None = None
    variance: float = 1.0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", MotionKind(self.kind))
        if self.kind is MotionKind.DETERMINISTIC and self.path is None:
            raise InvalidInput("deterministic trajectory needs a path")

    @classmethod
    def stationary(cls) -> "Trajectory":
        return cls(MotionKind.STATIONARY, label="stationary")

    @classmethod
    def brownian(cls, variance: float = 1.0) -> "Trajectory":
        return cls(MotionKind.BROWNIAN, variance=variance, label="brownian")

    @classmethod
    def deterministic(cls, path: Callable, label: str = "deterministic") -> "Trajectory":
        return cls(MotionKind.DETERMINISTIC, path=path, label=label)

    @classmethod
    def linear(cls, velocity) -> "Trajectory":
        v = np.atleast_1d(np.asarray(velocity, float))
        return cls.deterministic(lambda t, v=v: np.outer(np.asarray(t, float), v), label="linear")

    @property
    def is_random(self) -> bool:
        return self.kind is MotionKind.BROWNIAN

    def sample(self, times: np.ndarray, d: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Positions at the grid ``times`` (must start at 0); shape (len(times), d)."""
        times = np.asarray(times, float)
        if self.kind is MotionKind.STATIONARY:
            return np.zeros((len(times), d))
        if self.kind is MotionKind.DETERMINISTIC:
            out = np.asarray(self.path(times), float).reshape(len(times), -1)
            if out.shape[1] != d:
                raise InvalidInput(f"deterministic path has dimension {out.shape[1]}, expected {d}")
            if len(times) and times[0] == 0 and np.any(np.abs(out[0]) > 1e-12):
                raise InvalidInput("trajectory must start at the origin")
            return out
        if rng is None:
            raise InvalidInput("a Brownian trajectory needs a random stream")
        steps = np.sqrt(np.diff(times, prepend=0.0) * self.variance)[:, None] * rng.standard_normal((len(times), d))
        return np.cumsum(steps, axis=0)


def brownian_path(rng: np.random.Generator, n_steps: int, dt: float, d: int) -> np.ndarray:
    """Standard Brownian path on the grid 0, dt, ..., n_steps*dt; shape (n_steps+1, d)."""
    out = np.zeros((n_steps + 1, d))
    if n_steps:
        np.cumsum(rng.standard_normal((n_steps, d)) * math.sqrt(dt), axis=0, out=out[1:])
    return out


class WindowedNodes:
    """Poisson nodes on ``box`` moving by Brownian motion, tracked near an ROI.

    After construction the process sits at grid step 0; :meth:`advance` moves
    it one ``dt``.  At every step, every node lying inside the ROI (closed box
    ``roi_lo``..``roi_hi``) is among ``positions``; nodes farther than
    ``margin`` from the ROI slab in some coordinate may be dormant.

    ``marks`` are i.i.d. uniform labels used for superposition coupling:
    keeping nodes with ``mark < lam'/lam`` yields the process at intensity lam'.
    """

    def __init__(
        self,
        lam: float,
        box_lo,
        box_hi,
        roi_lo,
        roi_hi,
        dt: float,
        n_steps: int,
        rng: np.random.Generator,
        margin: float | None = None,
    ):
        self.rng = rng
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.roi_lo = np.asarray(roi_lo, float)
        self.roi_hi = np.asarray(roi_hi, float)
        self.margin = 4.0 * math.sqrt(self.dt) if margin is None else float(margin)
        self.step = 0
        pos = uniform_in_box(rng, lam, box_lo, box_hi)
        self.d = len(self.roi_lo)
        self.n_total = len(pos)
        ids = np.arange(self.n_total)
        marks = rng.random(self.n_total)
        self._dormant: dict[int, list] = {}
        self.positions = np.empty((0, self.d))
        self.ids = np.empty(0, dtype=np.int64)
        self.marks = np.empty(0)
        self.positions, self.ids, self.marks = self._settle(pos, ids, marks)

    @property
    def time(self) -> float:
        return self.step * self.dt

    @property
    def n_active(self) -> int:
        return len(self.positions)

    def _gaps(self, pos: np.ndarray) -> np.ndarray:
        return np.maximum(self.roi_lo - pos, pos - self.roi_hi)

    def _settle(self, pos, ids, marks):
        """Split nodes at the current step into active ones and sleepers."""
        if not len(pos):
            return pos, ids, marks
        gaps = self._gaps(pos)
        k = np.argmax(gaps, axis=1)
        g = gaps[np.arange(len(pos)), k]
        far = g > self.margin
        if np.any(far):
            fpos, fids, fmarks, fk, fg = pos[far], ids[far], marks[far], k[far], g[far]
            z = self.rng.standard_normal(len(fg))
            with np.errstate(divide="ignore"):
                tau = (fg / z) ** 2
            wake = self.step + np.ceil(tau / self.dt - 1e-12)
            keep = wake <= self.n_steps
            if np.any(keep):
                wake_i = wake[keep].astype(np.int64)
                fpos, fids, fmarks, fk, tau = fpos[keep], fids[keep], fmarks[keep], fk[keep], tau[keep]
                level = np.where(fpos[np.arange(len(fk)), fk] < self.roi_lo[fk], self.roi_lo[fk], self.roi_hi[fk])
                order = np.argsort(wake_i, kind="stable")
                wake_i = wake_i[order]
                starts = np.flatnonzero(np.r_[True, wake_i[1:] != wake_i[:-1]])
                ends = np.r_[starts[1:], len(wake_i)]
                for a, b in zip(starts, ends):
                    sel = order[a:b]
                    self._dormant.setdefault(int(wake_i[a]), []).append(
                        (fpos[sel], fids[sel], fmarks[sel], fk[sel], level[sel], tau[sel], self.step)
                    )
            near = ~far
            return pos[near], ids[near], marks[near]
        return pos, ids, marks

    def _wake(self, step: int):
        batches = self._dormant.pop(step, None)
        if not batches:
            return None
        pos = np.concatenate([b[0] for b in batches])
        ids = np.concatenate([b[1] for b in batches])
        marks = np.concatenate([b[2] for b in batches])
        k = np.concatenate([b[3] for b in batches])
        level = np.concatenate([b[4] for b in batches])
        tau = np.concatenate([b[5] for b in batches])
        slept = np.concatenate([np.full(len(b[0]), b[6]) for b in batches])
        elapsed = (step - slept) * self.dt
        z = self.rng.standard_normal(pos.shape)
        out = pos + np.sqrt(elapsed)[:, None] * z
        rows = np.arange(len(pos))
        after = np.maximum(elapsed - tau, 0.0)
        out[rows, k] = level + np.sqrt(after) * z[rows, k]
        return out, ids, marks

    def advance(self) -> None:
        """Move one grid step."""
        self.advance_block(1)

    def block_size(self, cap: int = 256, budget: int = 1 << 20) -> int:
        """Block length keeping a block's position array near ``budget`` floats."""
        n = max(self.n_active, 1) * self.d
        return int(max(1, min(cap, budget // n, self.n_steps - self.step)))

    def advance_block(self, m: int) -> tuple:
        """Advance ``m`` grid steps at once.

        Returns (steps, paths, ids, marks): ``paths[j]`` holds positions at grid
        step ``steps[j]`` for every node active at some point in the block,
        NaN before a node wakes.  Sleep decisions are taken at the block end
        only, so the guarantee on ROI membership holds at every step.
        """
        m = int(m)
        if m < 1 or self.step + m > self.n_steps:
            raise RuntimeError("windowed process advanced past its horizon")
        s0 = self.step
        steps = np.arange(s0 + 1, s0 + m + 1)
        base = [self.positions]
        ids = [self.ids]
        marks = [self.marks]
        rows = [np.full(len(self.positions), -1)]
        for w in range(s0 + 1, s0 + m + 1):
            woken = self._wake(w)
            if woken is not None:
                base.append(woken[0])
                ids.append(woken[1])
                marks.append(woken[2])
                rows.append(np.full(len(woken[0]), w - s0 - 1))
        base = np.concatenate(base)
        ids = np.concatenate(ids)
        marks = np.concatenate(marks)
        rows = np.concatenate(rows)
        n = len(base)
        incr = math.sqrt(self.dt) * self.rng.standard_normal((m, n, self.d))
        late = np.flatnonzero(rows >= 0)
        start = base
        if len(late):
            # woken nodes: no motion before their wake row, then start from the wake position
            lr = rows[late]
            before = np.arange(m)[:, None] < lr[None, :]
            sub = incr[:, late, :]
            sub[before] = 0.0
            sub[lr, np.arange(len(late)), :] = base[late]
            incr[:, late, :] = sub
            start = base.copy()
            start[late] = 0.0
        paths = start[None, :, :] + np.cumsum(incr, axis=0)
        if len(late):
            sub = paths[:, late, :]
            sub[before] = np.nan
            paths[:, late, :] = sub
        self.step = s0 + m
        self.positions, self.ids, self.marks = self._settle(paths[-1], ids, marks)
        return steps, paths, ids, marks

    def inside_roi(self, pad: float = 0.0) -> np.ndarray:
        """Boolean mask of active nodes inside the ROI enlarged by ``pad``."""
        p = self.positions
        return np.all((p >= self.roi_lo - pad) & (p <= self.roi_hi + pad), axis=1)
