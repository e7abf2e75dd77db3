import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occluflow.configs import ConfigurationCatalog, enumerate_configurations, is_connected
from occluflow.regions import LayoutError, default_masks, visible_regions

from conftest import strip_layout


def brute_force(n, edges, max_size, nodes=None):
    adj = {i: set() for i in range(1, n + 1)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    nodes = sorted(nodes or adj)
    out = set()
    for k in range(1, max_size + 1):
        for sub in itertools.combinations(nodes, k):
            s = set(sub)
            seen, todo = {sub[0]}, [sub[0]]
            while todo:
                u = todo.pop()
                for v in adj[u] & s:
                    if v not in seen:
                        seen.add(v)
                        todo.append(v)
            if seen == s:
                out.add(sub)
    return out


def test_path_catalog(path3):
    cat = enumerate_configurations(path3, 2)
    assert set(cat) == {(1,), (2,), (3,), (1, 2), (2, 3)}
    assert cat.total == 5


def test_triangle_catalog(triangle):
    cat = enumerate_configurations(triangle, 3)
    assert cat.counts() == {1: 3, 2: 3, 3: 1}
    assert cat.total == 7


def test_is_connected_examples(path3, layout):
    assert not is_connected(path3, {1, 3})
    assert is_connected(path3, {2})
    assert is_connected(layout, {6, 12, 15})
    with pytest.raises(LayoutError):
        is_connected(path3, set())


def test_errors(path3):
    with pytest.raises(LayoutError):
        enumerate_configurations(path3, 2, restrict_to=set())
    with pytest.raises(LayoutError):
        enumerate_configurations(path3, 0)
    with pytest.raises(LayoutError):
        enumerate_configurations(path3, 2, restrict_to={9})


def test_default_small_sizes(layout):
    cat = enumerate_configurations(layout, 2)
    assert cat.counts() == {1: 25, 2: 46}


def test_canonical_order(layout):
    confs = list(enumerate_configurations(layout, 3))
    assert confs == sorted(confs, key=lambda c: (len(c), c))
    assert all(list(c) == sorted(c) for c in confs)
    assert len(set(confs)) == len(confs)


def test_catalog_roundtrip(layout, tmp_path):
    cat = enumerate_configurations(layout, 3)
    cat.write(tmp_path / "cat.txt")
    back = ConfigurationCatalog.read(tmp_path / "cat.txt")
    assert list(back) == list(cat)


def test_restriction_matches_filter(layout):
    full = enumerate_configurations(layout, 4)
    for m in default_masks(layout).values():
        vis = visible_regions(layout, m)
        cat = enumerate_configurations(layout, 4, vis)
        assert all(not set(c) & m.occluded for c in cat)
        assert list(cat) == list(full.restricted(vis))


graphs = st.integers(2, 9).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.tuples(st.integers(1, n), st.integers(1, n)).filter(lambda e: e[0] != e[1]), max_size=20)))


@settings(max_examples=60, deadline=None)
@given(graphs, st.integers(1, 4))
def test_matches_power_set(g, max_size):
    n, edges = g
    edges = sorted({tuple(sorted(e)) for e in edges})
    lay = strip_layout(n, edges)
    cat = enumerate_configurations(lay, max_size)
    assert set(cat) == brute_force(n, edges, max_size)
    assert cat.counts().get(1, 0) == n
    if max_size >= 2:
        assert cat.counts().get(2, 0) == len(edges)


@settings(max_examples=40, deadline=None)
@given(graphs, st.data())
def test_enlarging_restriction_keeps_configurations(g, data):
    n, edges = g
    lay = strip_layout(n, sorted({tuple(sorted(e)) for e in edges}))
    small = data.draw(st.sets(st.integers(1, n), min_size=1))
    extra = data.draw(st.sets(st.integers(1, n)))
    a = set(enumerate_configurations(lay, 3, small))
    b = set(enumerate_configurations(lay, 3, small | extra))
    assert a <= b
    assert a == brute_force(n, [e for e in edges if set(e) <= small], 3, small)


def test_random_graphs_reference(path3):
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(2, 11))
        edges = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1) if rng.random() < 0.4]
        lay = strip_layout(n, edges)
        assert set(enumerate_configurations(lay, min(4, n))) == brute_force(n, edges, min(4, n))
