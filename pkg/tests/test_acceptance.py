"""End-to-end acceptance checks; each prints one pass/fail line."""

import itertools
import time
import warnings

import numpy as np
import pytest

from ztree.bounds import Box, d_low, d_up
from ztree.fof import FofOptions, fof, linking_length
from ztree.knn import KnnOptions, knn_query
from ztree.oracle import brute_fof, brute_knn, canonical_labels, sample_bound_check
from ztree.partsim import distributed_fof, distributed_knn, gather_knn, gather_labels, prepare
from ztree.treebuild import (TreeParams, build_hierarchy, extent_levels, gap_populations,
                             pair_levels, select_splits, windowed_leaf_splits)

from conftest import LINE8_X, make_points
from test_treebuild import check_hierarchy

N_SUITE = 4096
K_SUITE = [1, 16, 30, 64]


def knn_agrees(res, ref, ulps=4):
    tol = ulps * np.spacing(np.maximum(ref.distances, 1e-300))
    if not np.all(np.abs(res.distances - ref.distances) <= tol):
        return False
    d = ref.distances
    unique = np.ones_like(d, dtype=bool)
    unique[:, 1:] &= d[:, 1:] != d[:, :-1]
    unique[:, :-1] &= d[:, :-1] != d[:, 1:]
    return bool(np.array_equal(res.indices[unique], ref.indices[unique]))


def suite_data(dist, d, periodic, seed):
    if dist == "grid":
        s = make_points("grid", N_SUITE, d)
        q = s.copy()
    else:
        s = make_points(dist, N_SUITE, d, seed)
        q = make_points(dist, N_SUITE, d, seed + 1)
    if periodic:
        s, q = np.mod(s, 1.0), np.mod(q, 1.0)
    return s, q


@pytest.fixture(scope="module")
def knn_suite():
    """Cases of the kNN suite with one oracle table per dataset (k = 64, sliced per k)."""
    cases = []
    for d, dist, periodic in itertools.product([2, 3], ["grid", "uniform", "gaussian"], [False, True]):
        s, q = suite_data(dist, d, periodic, 10 * d)
        box = 1.0 if periodic else None
        ref = brute_knn(s, q, max(K_SUITE), box)
        cases.append((d, dist, periodic, s, q, box, ref))
    return cases


def test_c01_worked_example(acceptance):
    t0 = time.perf_counter()
    x = LINE8_X.reshape(-1, 1)
    lv = pair_levels(x)
    gap_n, _, _ = gap_populations(lv, np.zeros(8, np.int64), 1)
    leaf = windowed_leaf_splits(lv, np.zeros(8, np.int64), 1, 2)
    coarse = select_splits(leaf, gap_n, lv, 4)
    h = build_hierarchy([x], TreeParams(n_max0=2, c=2, n_target=1))
    dt = time.perf_counter() - t0
    ok = (lv[1:-1].tolist() == [2, -1, 3, 1, 2, 4, 0]
          and gap_n[1:-1].tolist() == [3, 2, 6, 2, 3, 8, 2]
          and leaf.tolist() == [0, 1, 3, 5, 6, 8]
          and coarse.tolist() == [0, 2, 4, 5]
          and h.planes[0].spl.tolist() == [0, 1, 3, 5, 6, 8]
          and h.planes[1].spl.tolist() == [0, 2, 4, 5]
          and dt < 1.0)
    acceptance(1, ok, f"8-point line example: levels, populations and splits exact ({dt * 1e3:.0f} ms)")
    assert ok


def test_c02_knn_oracle(acceptance, knn_suite):
    t_main = 0.0
    bad = []
    for d, dist, periodic, s, q, box, ref in knn_suite:
        for k in K_SUITE:
            t0 = time.perf_counter()
            res = knn_query(s, q, k, box)
            t_main += time.perf_counter() - t0
            sub = type(ref)(ref.indices[:, :k], ref.distances[:, :k])
            if not knn_agrees(res, sub):
                bad.append((d, dist, periodic, k))
    ok = not bad and t_main < 60
    acceptance(2, ok, f"{len(knn_suite) * len(K_SUITE)} kNN cases match brute force within 4 ulp, "
                      f"{len(bad)} mismatches ({t_main:.1f} s)")
    assert ok, bad


def test_c03_fof_oracle(acceptance):
    n = 3000
    rng = np.random.default_rng(3)
    x = rng.random((n, 3))
    alphas = [0.3, 0.55, 0.7, 0.85, 1.2]      # below, around and above percolation
    t_main = 0.0
    bad = []
    sizes = []
    for periodic in (False, True):
        box = 1.0 if periodic else None
        for a in alphas:
            R = linking_length(a, 1.0, n)
            t0 = time.perf_counter()
            r = fof(x, R, box)
            t_main += time.perf_counter() - t0
            mine = canonical_labels(r.labels_input())
            ref = canonical_labels(brute_fof(x, R, box))
            sizes.append(int(np.bincount(ref).max()))
            if not np.array_equal(mine, ref):
                bad.append((periodic, a))
    spans = min(sizes) < 0.05 * n and max(sizes) > 0.5 * n
    ok = not bad and spans and t_main < 60
    acceptance(3, ok, f"10 FoF partitions equal brute force, largest group {min(sizes)}..{max(sizes)} "
                      f"of {n}, {len(bad)} mismatches ({t_main:.1f} s)")
    assert ok, bad


def test_c04_bound_soundness(acceptance):
    rng = np.random.default_rng(4)
    violations = 0
    for t in range(1000):
        d = int(rng.integers(1, 4))
        periodic = t % 2 == 1
        P = 4.0
        c1, c2 = rng.uniform(-3, 3, (2, d))
        h1, h2 = rng.uniform(0, 1.5, (2, d)) * rng.integers(0, 2, (2, d))  # some zero extents
        box = P if periodic else None
        lo, hi = sample_bound_check((c1, h1), (c2, h2), box, 100, t)
        a, b = Box(c1, h1), Box(c2, h2)
        if not (d_low(a, b, box) <= lo and hi <= d_up(a, b, box)):
            violations += 1
    acceptance(4, violations == 0, f"1000 box pairs x 100 samples, {violations} bound violations")
    assert violations == 0


def test_c05_rank_transparency(acceptance):
    n = 10_000
    x_u = make_points("uniform", n, 3, 5)
    rng = np.random.default_rng(5)
    centers = rng.random((8, 3))
    x_c = np.mod(centers[rng.integers(0, 8, n)] + 0.02 * rng.standard_normal((n, 3)), 1.0)
    diffs = 0
    checks = 0
    for x in (x_u, x_c):
        ref_k = knn_query(x, None, 16, 1.0, KnnOptions(order="z"))
        R = linking_length(0.2, 1.0, n)
        ref_f = fof(x, R, 1.0).igroup
        for n_ranks in (2, 4, 8):
            cl = prepare(x, n_ranks, box=1.0)
            got = gather_knn(distributed_knn(cl, 16))
            diffs += int(np.count_nonzero(got.indices != ref_k.indices))
            diffs += int(np.count_nonzero(got.distances != ref_k.distances))
            diffs += int(np.count_nonzero(gather_labels(distributed_fof(cl, R)) != ref_f))
            checks += 1
    acceptance(5, diffs == 0, f"{checks} multi-rank runs (2/4/8 ranks) vs 1 rank, kNN + FoF, {diffs} differences")
    assert diffs == 0


def test_c06_tree_invariants(acceptance):
    rng = np.random.default_rng(6)
    failures = []
    for t in range(200):
        d = int(rng.integers(1, 5))
        n_types = int(rng.integers(1, 4))
        params = TreeParams(n_max0=int(rng.integers(1, 40)), c=int(rng.integers(2, 9)),
                            n_target=int(rng.integers(1, 64)),
                            f_max=float(rng.choice([2.0, 8.0, 50.0, np.inf])))
        typed = [rng.standard_normal((int(rng.integers(1, 400)), d)) ** 3 for _ in range(n_types)]
        try:
            h = build_hierarchy(typed, params)
            check_hierarchy(h, n_types)
            for pl in h.planes:
                for lvl, half in zip(pl.level.tolist(), pl.half):
                    if np.all((half > 0) & np.isfinite(half)):
                        assert np.log2(2 * half).tolist() == extent_levels(lvl, d)
                        assert int(np.log2(2 * half).sum()) == lvl
        except AssertionError:
            failures.append(t)
    acceptance(6, not failures, f"200 randomized hierarchies, {len(failures)} invariant violations")
    assert not failures


def test_c07_pruning_safety(acceptance, knn_suite):
    changed = 0
    runs = 0
    for d, dist, periodic, s, q, box, ref in knn_suite:
        for k in K_SUITE:
            base = knn_query(s, q, k, box)
            off = knn_query(s, q, k, box, KnnOptions(early_exit=False, sort_segments=False))
            changed += int(np.count_nonzero(base.indices != off.indices))
            changed += int(np.count_nonzero(base.distances.view(np.int64) != off.distances.view(np.int64)))
            runs += 1
    acceptance(7, changed == 0, f"{runs} kNN cases without early exit and segment sort, {changed} changed bits")
    assert changed == 0


def test_c08_chunking(acceptance):
    rng = np.random.default_rng(8)
    x = rng.random((N_SUITE, 3))
    res = knn_query(x, None, 64, None, KnnOptions(k_max=32))
    ref = brute_knn(x, None, 64)
    ok = knn_agrees(res, ref, ulps=0)
    ok &= bool(np.all(np.diff(res.distances, axis=1) >= 0))
    acceptance(8, ok, "k = 64 via two 32-wide passes equals brute force on 4096 points")
    assert ok


def _best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


@pytest.mark.slow
def test_c09_scaling(acceptance):
    sizes = [100_000, 400_000, 1_000_000]
    data = {n: np.random.default_rng(9).random((n, 3)) for n in sizes}
    knn_query(data[sizes[0]][:5000], k=16)         # compile outside the timed region
    fof(data[sizes[0]][:5000], 0.01, 1.0)
    t_knn = {n: _best_time(lambda: knn_query(data[n], k=16), 2 if n < 10**6 else 1) for n in sizes}
    t_fof = {n: _best_time(lambda: fof(data[n], linking_length(0.2, 1.0, n), 1.0), 2 if n < 10**6 else 1)
             for n in sizes}
    ratios = {}
    for name, t in (("knn", t_knn), ("fof", t_fof)):
        ratios[name] = (t[1_000_000] / t[100_000], t[400_000] / t[100_000])
    soft = all(a <= 15 and b <= 8 for a, b in ratios.values())
    hard = all(a <= 30 and b <= 16 for a, b in ratios.values())
    detail = ", ".join(f"{k} t(1e6)/t(1e5)={a:.1f} t(4e5)/t(1e5)={b:.1f}" for k, (a, b) in ratios.items())
    if not soft and hard:
        warnings.warn(f"scaling above the soft bound (loaded machine?): {detail}")
    acceptance(9, soft, detail + ("" if soft else " (within 2x, soft fail)" if hard else ""))
    assert hard, detail


def test_c10_fof_monotone(acceptance):
    x = make_points("gaussian", 10_000, 3, 10)
    x = np.mod(x, 1.0)
    alphas = [0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.8, 1.2]
    counts = [fof(x, linking_length(a, 1.0, len(x)), 1.0).n_groups for a in alphas]
    ok = all(b <= a for a, b in zip(counts, counts[1:])) and counts[0] > counts[-1]
    acceptance(10, ok, f"group counts over alpha {alphas}: {counts}")
    assert ok
