"""Radius-r geometric graphs: component labels, crossing and giant components."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numba
import numpy as np

from .core.config import InvalidDomain, InvalidInput
from .core.points import NodeEnsemble


@numba.njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True)
def _cell_union_find(pos, r2, cells, order, ukeys, starts, ncell, offsets, side, periodic):
    n, d = pos.shape
    parent = np.arange(n)
    c = np.empty(d, np.int64)
    for i in range(n):
        for o in range(offsets.shape[0]):
            ok = True
            for k in range(d):
                ck = cells[i, k] + offsets[o, k]
                if periodic:
                    ck = ck % ncell[k]
                elif ck < 0 or ck >= ncell[k]:
                    ok = False
                    break
                c[k] = ck
            if not ok:
                continue
            key = 0
            for k in range(d):
                key = key * ncell[k] + c[k]
            # binary search for the occupied cell
            lo = 0
            hi = ukeys.shape[0]
            while lo < hi:
                mid = (lo + hi) // 2
                if ukeys[mid] < key:
                    lo = mid + 1
                else:
                    hi = mid
            if lo == ukeys.shape[0] or ukeys[lo] != key:
                continue
            for idx in range(starts[lo], starts[lo + 1]):
                j = order[idx]
                if j <= i:
                    continue
                s = 0.0
                for k in range(d):
                    dx = abs(pos[i, k] - pos[j, k])
                    if periodic and dx > 0.5 * side:
                        dx = side - dx
                    s += dx * dx
                if s <= r2:
                    a = _find(parent, i)
                    b = _find(parent, j)
                    if a != b:
                        # smaller index becomes the root
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
    for i in range(n):
        parent[i] = _find(parent, i)
    return parent


@dataclass(frozen=True)
class CellIndex:
    """Occupied cells of side >= r: node ``order[starts[q]:starts[q+1]]`` lie in cell ``keys[q]``."""

    origin: np.ndarray
    cell_side: np.ndarray
    ncell: np.ndarray
    cells: np.ndarray
    keys: np.ndarray
    order: np.ndarray
    starts: np.ndarray


@dataclass(frozen=True)
class GeometricGraph:
    positions: np.ndarray
    r: float
    labels: np.ndarray
    sizes: np.ndarray
    cell_index: CellIndex
    torus_side: float | None = None

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def n_components(self) -> int:
        return len(self.sizes)

    def members(self, cid: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cid)

    def partition(self) -> list:
        """Components as sorted tuples of node indices, ordered by smallest member."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return [tuple(g) for g in np.split(order, bounds)] if self.n else []


@dataclass(frozen=True)
class CrossingReport:
    exists: bool
    unique: bool
    component_id: int | None
    member_count: int
    members: np.ndarray | None = None


def _offsets(d: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int64)


def _build_cells(pos: np.ndarray, r: float, torus_side: float | None) -> CellIndex:
    n, d = pos.shape
    if torus_side is not None:
        m = max(1, int(np.floor(torus_side / r)))
        ncell = np.full(d, m, dtype=np.int64)
        side = np.full(d, torus_side / m)
        origin = np.zeros(d)
        cells = np.minimum((pos / side).astype(np.int64), m - 1)
    else:
        origin = pos.min(axis=0) if n else np.zeros(d)
        side = np.full(d, float(r))
        cells = np.floor((pos - origin) / side).astype(np.int64)
        ncell = (cells.max(axis=0) + 1) if n else np.ones(d, dtype=np.int64)
    keys = np.zeros(n, dtype=np.int64)
    for k in range(d):
        keys = keys * ncell[k] + cells[:, k]
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    ukeys, first = np.unique(skeys, return_index=True)
    starts = np.r_[first, n].astype(np.int64)
    return CellIndex(origin, side, ncell, cells, ukeys, order, starts)


def _as_positions(ensemble) -> tuple:
    if isinstance(ensemble, NodeEnsemble):
        return np.asarray(ensemble.positions, float), ensemble.torus_side
    return np.atleast_2d(np.asarray(ensemble, float)), None


def build_graph(ensemble, r: float, torus_side: float | None = None) -> GeometricGraph:
    """Label connected components of the graph joining nodes at distance <= r.

    ``ensemble`` is a :class:`NodeEnsemble` or an (n, d) array; ``torus_side``
    switches to the wrapped metric (taken from the ensemble when it has one).
    """
    if not r > 0:
        raise InvalidInput("r must be > 0")
    pos, ens_side = _as_positions(ensemble)
    side = torus_side if torus_side is not None else ens_side
    if pos.size == 0:
        d = pos.shape[1] if pos.ndim == 2 else 1
        pos = pos.reshape(0, d)
    n, d = pos.shape
    idx = _build_cells(pos, r, side)
    if n:
        roots = _cell_union_find(
            np.ascontiguousarray(pos),
            float(r) * float(r),
            idx.cells,
            idx.order,
            idx.keys,
            idx.starts,
            idx.ncell,
            _offsets(d),
            float(side) if side is not None else 0.0,
            side is not None,
        )
        _, labels, sizes = np.unique(roots, return_inverse=True, return_counts=True)
    else:
        labels = np.empty(0, dtype=np.int64)
        sizes = np.empty(0, dtype=np.int64)
    return GeometricGraph(pos, float(r), labels.astype(np.int64), sizes.astype(np.int64), idx, side)


def _face_flags(pos: np.ndarray, labels: np.ndarray, n_comp: int, half: float, r: float) -> np.ndarray:
    d = pos.shape[1]
    flags = np.zeros((n_comp, 2 * d), dtype=bool)
    for k in range(d):
        np.logical_or.at(flags[:, 2 * k], labels, pos[:, k] <= -half + r)
        np.logical_or.at(flags[:, 2 * k + 1], labels, pos[:, k] >= half - r)
    return flags


def crossing_component(graph: GeometricGraph, cube_side: float) -> CrossingReport:
    """Component of the nodes inside Q_L (centered at 0) touching all 2d faces within distance r.

    When every node of ``graph`` lies in the cube, ``component_id`` is a label
    of ``graph``; otherwise components of the induced subgraph are used and
    ``members`` gives the original node indices.
    """
    if graph.torus_side is not None:
        raise InvalidDomain("crossing components are defined on a boxed plane")
    half = cube_side / 2
    pos = graph.positions
    inside = np.all(np.abs(pos) <= half, axis=1) if len(pos) else np.zeros(0, bool)
    if not np.any(inside):
        return CrossingReport(False, False, None, 0, np.empty(0, np.int64))
    if np.all(inside):
        labels, sizes, sub_idx = graph.labels, graph.sizes, np.arange(len(pos))
    else:
        sub_idx = np.flatnonzero(inside)
        sub = build_graph(pos[sub_idx], graph.r)
        labels, sizes = sub.labels, sub.sizes
    flags = _face_flags(pos[sub_idx], labels, len(sizes), half, graph.r)
    crossing = np.flatnonzero(flags.all(axis=1))
    if not len(crossing):
        return CrossingReport(False, False, None, 0, np.empty(0, np.int64))
    best = crossing[np.argmax(sizes[crossing])]
    members = sub_idx[labels == best]
    return CrossingReport(True, len(crossing) == 1, int(best), int(sizes[best]), members)


def torus_delta(a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    dx = np.abs(a - b)
    return np.minimum(dx, side - dx)


def _diameter_exceeds(pts: np.ndarray, side: float, bound: float) -> bool:
    """Whether some pair of ``pts`` lies at torus distance > bound."""
    if len(pts) < 2:
        return False
    b2 = bound * bound
    # quick certificates from a sweep of farthest points
    a = pts[0]
    for _ in range(2):
        dist2 = np.sum(torus_delta(pts, a, side) ** 2, axis=1)
        j = int(np.argmax(dist2))
        if dist2[j] > b2:
            return True
        a = pts[j]
    if np.max(np.sum(torus_delta(pts, pts[0], side) ** 2, axis=1)) * 4 <= b2:
        return False
    chunk = max(1, 2_000_000 // len(pts))
    for s in range(0, len(pts), chunk):
        blk = pts[s : s + chunk]
        dx = torus_delta(blk[:, None, :], pts[None, :, :], side)
        if np.any(np.sum(dx * dx, axis=2) > b2):
            return True
    return False


def giant_components(graph: GeometricGraph) -> np.ndarray:
    """Ids of components holding two nodes at torus distance > side/4."""
    if graph.torus_side is None:
        raise InvalidDomain("giant components are defined on the torus")
    side = graph.torus_side
    out = []
    order = np.argsort(graph.labels, kind="stable")
    bounds = np.r_[0, np.cumsum(graph.sizes)]
    for cid in np.argsort(-graph.sizes, kind="stable"):
        if graph.sizes[cid] < 2:
            break
        # a component of m nodes spans at most (m-1) r
        if (graph.sizes[cid] - 1) * graph.r <= side / 4:
            continue
        pts = graph.positions[order[bounds[cid] : bounds[cid + 1]]]
        if _diameter_exceeds(pts, side, side / 4):
            out.append(int(cid))
    return np.array(sorted(out), dtype=np.int64)


def giant_component(graph: GeometricGraph) -> CrossingReport:
    giants = giant_components(graph)
    if not len(giants):
        return CrossingReport(False, False, None, 0, np.empty(0, np.int64))
    best = giants[np.argmax(graph.sizes[giants])]
    return CrossingReport(True, len(giants) == 1, int(best), int(graph.sizes[best]), graph.members(best))


def nodes_near(graph: GeometricGraph, point) -> np.ndarray:
    p = np.asarray(point, float)
    if graph.torus_side is not None:
        dx = torus_delta(graph.positions, p, graph.torus_side)
    else:
        dx = graph.positions - p
    return np.flatnonzero(np.sum(dx * dx, axis=1) <= graph.r * graph.r)


def component_of_target(graph: GeometricGraph, point) -> int | None:
    """Component with a node within r of ``point``: largest one, ties to the smallest id."""
    near = nodes_near(graph, point)
    if not len(near):
        return None
    cands = np.unique(graph.labels[near])
    sizes = graph.sizes[cands]
    return int(cands[sizes == sizes.max()].min())
