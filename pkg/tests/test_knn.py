import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztree.errors import ValidationError
from ztree.ilist import InteractionList, dense_init
from ztree.knn import (CountHeap, KnnOptions, NodeTable, countheap_insert, find_rmax, knn_query,
                       leaf_to_leaf, node_to_node, radius_of_count)
from ztree.oracle import brute_knn, pair_distances
from ztree.treebuild import TreeParams

from conftest import make_points


def assert_matches_oracle(res, ref, ulps=4):
    tol = ulps * np.spacing(np.maximum(ref.distances, 1e-300))
    assert np.all(np.abs(res.distances - ref.distances) <= tol)
    # indices must agree wherever the distance is not shared with a neighbour slot
    d = ref.distances
    unique = np.ones_like(d, dtype=bool)
    unique[:, 1:] &= d[:, 1:] != d[:, :-1]
    unique[:, :-1] &= d[:, :-1] != d[:, 1:]
    assert np.array_equal(res.indices[unique], ref.indices[unique])


# ----------------------------------------------------------------------------
# count heap


def heap(pairs, cap=2):
    return CountHeap(cap, [p[0] for p in pairs], [p[1] for p in pairs])


def test_radius_of_count_examples():
    h = heap([(1.0, 3), (2.0, 5)])
    assert radius_of_count(h, 3) == 1.0
    assert radius_of_count(h, 4) == 2.0
    assert radius_of_count(h, 9) == math.inf
    assert radius_of_count(CountHeap(), 1) == math.inf


def test_countheap_insert_examples():
    h = countheap_insert(CountHeap(), 1.0, 5, 3)
    assert list(zip(h.radii, h.counts)) == [(1.0, 5)]
    h = heap([(1.0, 3), (2.0, 5)])
    merged = countheap_insert(h, 1.5, 2, 6)
    assert list(zip(merged.radii, merged.counts)) == [(1.0, 3), (2.0, 7)]
    dropped = countheap_insert(h, 1.5, 2, 4)
    assert list(zip(dropped.radii, dropped.counts)) == [(1.0, 3), (1.5, 2)]


@given(st.lists(st.tuples(st.floats(0, 100), st.integers(1, 10)), min_size=1, max_size=40),
       st.integers(1, 30), st.integers(1, 8))
def test_countheap_radius_is_conservative(items, k, cap):
    """The heap radius never undercuts the exact radius holding k counts."""
    h = CountHeap(cap)
    seen = []
    for r, n in items:
        if r < radius_of_count(h, k):
            h = countheap_insert(h, r, n, k)
        seen.append((r, n))
        assert h.radii == sorted(h.radii) and len(h.radii) <= cap
        cum, exact = 0, math.inf
        for rr, nn in sorted(seen):
            cum += nn
            if cum >= k:
                exact = rr
                break
        assert radius_of_count(h, k) >= exact


# ----------------------------------------------------------------------------
# walk kernels on hand-made tables


def table(centers, halves, counts, beg=(0,), end=None):
    c = np.asarray(centers, dtype=np.float64).reshape(len(counts), -1)
    h = np.asarray(halves, dtype=np.float64).reshape(c.shape)
    end = (len(counts),) if end is None else end
    return NodeTable(c, h, np.asarray(counts, np.int64), np.asarray(beg, np.int64),
                     np.asarray(end, np.int64))


def test_find_rmax_single_node():
    t = table([[0.5, 0.5]], [[0.0, 0.0]], [7])
    assert find_rmax(dense_init(1), t, t, 5).tolist() == [0.0]


def test_find_rmax_two_nodes():
    k = 6
    t = table([[0.0], [1.0]], [[0.0], [0.0]], [1, k - 1])
    r = find_rmax(dense_init(1), t, t, k)
    # the safety margin widens the bound by a few ulp, never narrows it
    assert np.all(r >= 1.0) and r == pytest.approx([1.0, 1.0], rel=1e-13)


def test_find_rmax_insufficient():
    t = table([[0.0], [1.0]], [[0.0], [0.0]], [1, 2])
    assert find_rmax(dense_init(1), t, t, 4).tolist() == [math.inf, math.inf]


def test_node_to_node_extremes():
    t = table([[0.0], [2.0], [4.0]], [[0.5]] * 3, [1, 1, 1])
    il = dense_init(1)
    full = node_to_node(il, t, t, np.full(3, np.inf))
    assert full.ispl.tolist() == [0, 3, 6, 9]
    assert sorted(full.segment(1).tolist()) == [0, 1, 2]
    own = node_to_node(il, t, t, np.zeros(3))
    assert own.isrc.tolist() == [0, 1, 2] and own.ispl.tolist() == [0, 1, 2, 3]


def test_node_to_node_line_matches_pruning_oracle():
    cen = np.array([[0.5], [1.5], [4.5], [9.0]])
    half = np.array([[0.5], [0.5], [0.5], [1.0]])
    cnt = [2, 1, 3, 2]
    t = table(cen, half, cnt)
    il = dense_init(1)
    rmax = find_rmax(il, t, t, 1)
    out = node_to_node(il, t, t, rmax)
    for i in range(4):
        # oracle: d_low / d_up by interval arithmetic over all node pairs
        lo = np.maximum(np.abs(cen[:, 0] - cen[i, 0]) - half[:, 0] - half[i, 0], 0.0)
        up = np.abs(cen[:, 0] - cen[i, 0]) + half[:, 0] + half[i, 0]
        r = min(up[j] for j in range(4) if cnt[j] >= 1)
        assert rmax[i] >= r and rmax[i] <= r * (1 + 1e-12)
        keep = sorted(j for j in range(4) if lo[j] <= r)
        assert sorted(out.segment(i).tolist()) == keep
        assert np.all(np.diff(out.r_low[out.ispl[i]:out.ispl[i + 1]]) >= 0)


def test_leaf_to_leaf_line():
    sx = np.array([[0.0], [1.0], [3.0]])
    il = InteractionList([0], [0, 1], [0.0])
    idx, dist = leaf_to_leaf(il, [0], [3], [0], [3], sx, sx, np.arange(3), 2)
    assert idx[1].tolist() == [1, 0] and dist[1].tolist() == [0.0, 1.0]
    assert idx[2].tolist() == [2, 1] and dist[2].tolist() == [0.0, 2.0]
    # continuing past (0.0, own index) skips the self match
    idx, dist = leaf_to_leaf(il, [0], [3], [0], [3], sx, sx, np.arange(3), 1,
                             r_min=np.zeros(3), index_offset=np.arange(3))
    assert idx[:, 0].tolist() == [1, 0, 1]


def test_leaf_to_leaf_periodic():
    sx = np.array([[0.5], [9.5]])
    il = InteractionList([0], [0, 1], [0.0])
    idx, dist = leaf_to_leaf(il, [0], [2], [0], [2], sx, sx, np.arange(2), 2, domain=10.0)
    assert dist[:, 1].tolist() == [1.0, 1.0]
    assert idx.tolist() == [[0, 1], [1, 0]]


def test_leaf_to_leaf_k_cap():
    sx = np.zeros((40, 1))
    il = InteractionList([0], [0, 1], [0.0])
    with pytest.raises(ValidationError):
        leaf_to_leaf(il, [0], [40], [0], [40], sx, sx, np.arange(40), 33)


# ----------------------------------------------------------------------------
# end to end against the oracle


def test_self_query_is_own_first_neighbour(rng):
    x = rng.random((500, 2))
    r = knn_query(x, k=1)
    assert r.indices[:, 0].tolist() == list(range(500))
    assert np.all(r.distances == 0)


def test_grid_self_query():
    x = make_points("grid", 9, 2, 0)
    r = knn_query(x, k=5)
    ref = brute_knn(x, k=5)
    assert np.array_equal(r.indices, ref.indices)
    assert np.array_equal(r.distances, ref.distances)


def test_separate_queries_4096(rng):
    s = rng.random((4096, 3))
    q = rng.random((4096, 3))
    assert_matches_oracle(knn_query(s, q, k=30), brute_knn(s, q, k=30))


def test_two_chunks_4096(rng):
    s = rng.random((4096, 3))
    res = knn_query(s, k=64)
    ref = brute_knn(s, k=64)
    assert_matches_oracle(res, ref)
    # chunk seam: globally sorted, no duplicates
    assert np.all(np.diff(res.distances, axis=1) >= 0)
    for row in res.indices[::97]:
        assert len(set(row.tolist())) == 64


@pytest.mark.parametrize("d", [1, 2, 3, 6])
@pytest.mark.parametrize("k", [1, 16, 30, 64])
@pytest.mark.parametrize("periodic", [False, True])
def test_exactness_grid(d, k, periodic):
    rng = np.random.default_rng(1000 * d + k + periodic)
    n = 2500
    s = rng.random((n, d)) * 4.0
    q = rng.random((n // 2, d)) * 4.0
    box = 4.0 if periodic else None
    assert_matches_oracle(knn_query(s, q, k, box), brute_knn(s, q, k, box))


@pytest.mark.parametrize("kind", ["gaussian", "grid"])
def test_exactness_structured(kind):
    x = make_points(kind, 4096, 3, 3)
    assert_matches_oracle(knn_query(x, k=16), brute_knn(x, k=16))


def test_exactness_ten_thousand(rng):
    s = rng.random((10_000, 3))
    q = s[:700]
    assert_matches_oracle(knn_query(s, q, 16, 1.0), brute_knn(s, q, 16, 1.0))


def test_duplicates_tie_to_lower_index():
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 20, axis=0)
    r = knn_query(x, np.array([[0.1, 0.1]]), k=25)
    ref = brute_knn(x, np.array([[0.1, 0.1]]), k=25)
    assert np.array_equal(r.indices, ref.indices)


def test_pruning_toggles_change_nothing(rng):
    s = rng.random((3000, 3))
    q = rng.random((1500, 3))
    small = TreeParams(n_target=64)
    base = knn_query(s, q, 40, 1.0, KnnOptions(tree=small))
    for ee, ss in [(False, True), (True, False), (False, False)]:
        other = knn_query(s, q, 40, 1.0, KnnOptions(tree=small, early_exit=ee, sort_segments=ss))
        assert np.array_equal(base.indices, other.indices)
        assert np.array_equal(base.distances, other.distances)


@pytest.mark.parametrize("periodic", [False, True])
def test_rmax_soundness(periodic):
    rng = np.random.default_rng(7)
    s = rng.random((3000, 2))
    q = rng.random((1000, 2))
    box = 1.0 if periodic else None
    k = 12
    res = knn_query(s, q, k, box, KnnOptions(tree=TreeParams(n_target=50), keep_rmax=True, order="z"))
    ref = brute_knn(s, res_queries(q, res), k, box)
    kth = ref.distances[:, -1]
    # query rank within its type for every point of the joint sorted array
    from ztree.treebuild import build_hierarchy
    h = build_hierarchy([s, q], TreeParams(n_target=50))
    is_q = h.types == 1
    qrank = np.cumsum(is_q) - 1
    for pl, rmax in zip(h.planes, res.rmax):
        for i in range(pl.n_nodes):
            sel = is_q[pl.start[i]:pl.start[i + 1]]
            if not sel.any():
                assert rmax[i] == -1.0
                continue
            rows = qrank[pl.start[i]:pl.start[i + 1]][sel]
            assert kth[rows].max() <= rmax[i]


def res_queries(q, res):
    return q[res.query_perm]


def test_z_order_output_consistent(rng):
    s = rng.random((800, 2))
    q = rng.random((300, 2))
    a = knn_query(s, q, 7)
    z = knn_query(s, q, 7, options=KnnOptions(order="z"))
    assert np.array_equal(a.distances[z.query_perm], z.distances)
    assert np.array_equal(a.indices[z.query_perm], z.source_perm[z.indices])


def test_type_order_independent(rng):
    """Swapping which type is concatenated first does not change results."""
    from ztree.knn import _walk, chunked_leaf_pass
    from ztree.treebuild import build_hierarchy
    s = rng.random((1200, 3))
    q = rng.random((900, 3))
    k = 9
    L = np.zeros(3)
    out = []
    for s_type, q_type, typed in [(0, 1, [s, q]), (1, 0, [q, s])]:
        h = build_hierarchy(typed, TreeParams(n_target=80))
        il = _walk(h, q_type, s_type, k, L, KnnOptions())
        sx, qx = h.sorted_points[s_type], h.sorted_points[q_type]
        ss, qs = h.leaf_splits[s_type], h.leaf_splits[q_type]
        idx, dist = chunked_leaf_pass(il, qs[:-1], qs[1:], ss[:-1], ss[1:], qx, sx,
                                      h.permutations[s_type], k)
        o_i = np.empty_like(idx)
        o_d = np.empty_like(dist)
        o_i[h.permutations[q_type]] = idx
        o_d[h.permutations[q_type]] = dist
        out.append((o_i, o_d))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])


@settings(max_examples=25)
@given(st.integers(1, 3), st.integers(1, 300), st.integers(1, 40), st.booleans(),
       st.integers(0, 2**31))
def test_exactness_property(d, n, k, periodic, seed):
    rng = np.random.default_rng(seed)
    # coarse coordinates force many exact ties
    s = np.round(rng.random((n, d)) * 8) / 2
    q = np.round(rng.random((max(1, n // 3), d)) * 8) / 2
    k = min(k, n)
    box = 4.0 if periodic else None
    res = knn_query(s, q, k, box, KnnOptions(tree=TreeParams(n_target=16)))
    ref = brute_knn(s, q, k, box)
    assert np.array_equal(res.distances, ref.distances)
    assert np.array_equal(res.indices, ref.indices)


def test_errors(rng):
    x = rng.random((10, 2))
    with pytest.raises(ValidationError):
        knn_query(x, k=11)
    with pytest.raises(ValidationError):
        knn_query(x, k=0)
    bad = x.copy()
    bad[3, 1] = np.nan
    with pytest.raises(ValidationError):
        knn_query(bad, k=2)
    with pytest.raises(ValidationError):
        knn_query(x, rng.random((3, 3)), k=2)


def test_distances_are_oracle_metric(rng):
    s = rng.random((200, 2)) * 3
    r = knn_query(s, k=4, box=3.0)
    D = pair_distances(s, s, 3.0)
    assert np.array_equal(r.distances, np.take_along_axis(D, r.indices, axis=1))
