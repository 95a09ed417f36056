from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from mobigg.core import InvalidDomain, InvalidInput
from mobigg.core import rng as streams
from mobigg.graph import (
    build_graph,
    component_of_target,
    crossing_component,
    giant_component,
    giant_components,
    nodes_near,
    torus_delta,
)


def bfs_partition(pos, r, side=None):
    """Reference partition from a dense distance matrix and breadth-first search."""
    if side is None:
        dist = cdist(pos, pos)
    else:
        dx = np.abs(pos[:, None, :] - pos[None, :, :])
        dist = np.sqrt(np.sum(np.minimum(dx, side - dx) ** 2, axis=2))
    adj = dist <= r
    seen = np.zeros(len(pos), bool)
    parts = []
    for s in range(len(pos)):
        if seen[s]:
            continue
        comp, q = [], deque([s])
        seen[s] = True
        while q:
            i = q.popleft()
            comp.append(i)
            for j in np.flatnonzero(adj[i] & ~seen):
                seen[j] = True
                q.append(j)
        parts.append(tuple(sorted(comp)))
    return sorted(parts)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_partition_matches_bfs(d):
    for k in range(20):
        g = streams.stream(d, k)
        n = int(g.integers(1, 300))
        pos = g.uniform(0, 10, (n, d))
        assert sorted(build_graph(pos, 1.2).partition()) == bfs_partition(pos, 1.2)


def test_torus_partition_matches_bfs():
    for k in range(15):
        g = streams.stream(99, k)
        pos = g.uniform(0, 8.0, (150, 2))
        assert sorted(build_graph(pos, 1.0, torus_side=8.0).partition()) == bfs_partition(pos, 1.0, 8.0)


@settings(max_examples=40, deadline=None)
@given(
    pts=st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=40),
    r=st.floats(0.05, 3.0),
)
def test_partition_property(pts, r):
    pos = np.array(pts, float)
    gph = build_graph(pos, r)
    assert sorted(gph.partition()) == bfs_partition(pos, r)
    assert gph.sizes.sum() == len(pos)


def test_edge_at_exactly_r_is_included():
    g = build_graph(np.array([[0.0], [1.0], [2.5]]), 1.0)
    assert g.labels[0] == g.labels[1] != g.labels[2]


def test_wraparound_joins_across_seam():
    pos = np.array([[0.1, 5.0], [9.9, 5.0]])
    assert build_graph(pos, 0.5, torus_side=10.0).n_components == 1
    assert build_graph(pos, 0.5).n_components == 2
    np.testing.assert_allclose(torus_delta(pos[0], pos[1], 10.0), [0.2, 0.0], atol=1e-12)


def test_empty_and_bad_radius():
    assert build_graph(np.empty((0, 2)), 1.0).n_components == 0
    with pytest.raises(InvalidInput):
        build_graph(np.zeros((2, 2)), 0.0)


def test_crossing_chain():
    xs = np.arange(-5.0, 5.01, 0.5)
    chain = np.c_[xs, np.zeros_like(xs)]
    ys = np.arange(-5.0, 5.01, 0.5)
    col = np.c_[np.zeros_like(ys), ys]
    rep = crossing_component(build_graph(np.r_[chain, col], 0.6), 10.0)
    assert rep.exists and rep.unique
    only_row = crossing_component(build_graph(chain, 0.6), 10.0)
    assert not only_row.exists


def test_crossing_needs_boxed_plane():
    with pytest.raises(InvalidDomain):
        crossing_component(build_graph(np.zeros((1, 2)), 1.0, torus_side=4.0), 4.0)


def test_giant_components_on_torus():
    ring = np.c_[np.arange(0, 10.0, 0.5), np.full(20, 5.0)]
    blob = np.array([[2.0, 1.0], [2.3, 1.0]])
    g = build_graph(np.r_[ring, blob], 0.6, torus_side=10.0)
    ids = giant_components(g)
    assert list(ids) == [g.labels[0]]
    rep = giant_component(g)
    assert rep.exists and rep.member_count == 20
    with pytest.raises(InvalidDomain):
        giant_components(build_graph(ring, 0.6))


def test_nodes_near_and_target_component():
    pos = np.array([[0.0, 0.0], [0.5, 0.0], [3.0, 3.0]])
    g = build_graph(pos, 0.6)
    assert set(nodes_near(g, [0.2, 0.0])) == {0, 1}
    assert component_of_target(g, [0.2, 0.0]) == g.labels[0]
    assert component_of_target(g, [10.0, 10.0]) is None
