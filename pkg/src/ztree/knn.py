"""Exact k-nearest neighbours through a dual walk over the tree-planes.

Walk outline, coarse to fine:

* coarsest nodes are grouped into super nodes and every super node
  interacts with every other one;
* per plane, each receiving child gets an upper radius ``R_max`` from a
  small (radius, count) heap fed with ``d_up`` to source children, and
  keeps only source children with ``d_low <= R_max``;
* at the leaves, each query point scans the surviving source leaves.

Receiver and source node tables are passed separately so the rank
simulator can feed source tables assembled from remote data.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .bounds import EPS, _dlow_safe, _dup_safe, _wrap
from .errors import ValidationError
from .ilist import InteractionList, dense_init, exclusive_scan_prepend0, sort_segments, super_node_splits
from .points import PointSet, as_positions, periods, wrap_into_box
from .treebuild import TreeHierarchy, TreeParams, build_hierarchy

K_MAX = 32
NGR = 32
N_R = 8



@dataclass
class KnnOptions:
    tree: TreeParams = field(default_factory=TreeParams)
    ngr: int = NGR
    k_max: int = K_MAX
    n_r: int = N_R
    early_exit: bool = True
    sort_segments: bool = True
    order: str = "input"      # "input" or "z"
    keep_rmax: bool = False


@dataclass
class KnnResult:
    indices: np.ndarray
    distances: np.ndarray
    order: str
    timings: dict = field(default_factory=dict)
    rmax: list = field(default_factory=list)       # per plane, fine to coarse
    query_perm: np.ndarray | None = None           # z row -> query input index
    source_perm: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.indices.shape[1]


# ----------------------------------------------------------------------------
# count heap


@dataclass
class CountHeap:
    capacity: int = N_R
    radii: list = field(default_factory=list)
    counts: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts)


def radius_of_count(h: CountHeap, k: int) -> float:
    """Smallest stored radius whose cumulative count reaches k."""
    cum = 0
    for r, c in zip(h.radii, h.counts):
        cum += c
        if cum >= k:
            return r
    return math.inf


def countheap_insert(h: CountHeap, r: float, n: int, k: int) -> CountHeap:
    radii = np.zeros(h.capacity)
    counts = np.zeros(h.capacity, dtype=np.int64)
    m = len(h.radii)
    radii[:m] = h.radii
    counts[:m] = h.counts
    m = _heap_insert(radii, counts, m, float(r), int(n), int(k))
    return CountHeap(h.capacity, radii[:m].tolist(), counts[:m].tolist())


@nb.njit(cache=True)
def _heap_radius(hr, hc, m, k):
    cum = 0
    for t in range(m):
        cum += hc[t]
        if cum >= k:
            return hr[t]
    return np.inf


@nb.njit(cache=True)
def _heap_insert(hr, hc, m, r, n, k):
    """Insert (r, n) into the first m sorted slots; returns the new size."""
    cap = hr.shape[0]
    pos = m
    while pos > 0 and hr[pos - 1] > r:
        pos -= 1
    if m == cap:
        total = 0
        for t in range(m):
            total += hc[t]
        if pos == m:
            # the newcomer itself would be dropped
            if total < k:
                hc[m - 1] += n
                if r > hr[m - 1]:
                    hr[m - 1] = r
            return m
        if total + n - hc[m - 1] < k:
            hc[pos] += n
            return m
        m -= 1
    for t in range(m, pos, -1):
        hr[t] = hr[t - 1]
        hc[t] = hc[t - 1]
    hr[pos] = r
    hc[pos] = n
    return m + 1


# ----------------------------------------------------------------------------
# walk kernels


@nb.njit(cache=True)
def _find_rmax(ispl, isrc, r_low, r_chl, r_cen, r_half, r_cnt,
               s_cbeg, s_cend, s_cen, s_half, s_cnt, k, n_r, L, early, ordered):
    n_child = r_cen.shape[0]
    rmax = np.full(n_child, -1.0)
    maxch = 1
    for p in range(r_chl.shape[0] - 1):
        maxch = max(maxch, r_chl[p + 1] - r_chl[p])
    hr = np.zeros((maxch, n_r))
    hc = np.zeros((maxch, n_r), dtype=np.int64)
    hm = np.zeros(maxch, dtype=np.int64)
    est = np.zeros(maxch)
    for p in range(r_chl.shape[0] - 1):
        c0 = r_chl[p]
        nch = r_chl[p + 1] - c0
        active = 0
        for u in range(nch):
            hm[u] = 0
            est[u] = np.inf if r_cnt[c0 + u] > 0 else -1.0
            if r_cnt[c0 + u] > 0:
                active += 1
        if active == 0:
            continue
        for t in range(ispl[p], ispl[p + 1]):
            if early:
                worst = -1.0
                for u in range(nch):
                    worst = max(worst, est[u])
                if worst < r_low[t]:
                    if ordered:
                        break
                    continue
            q = isrc[t]
            for j in range(s_cbeg[q], s_cend[q]):
                ns = s_cnt[j]
                if ns == 0:
                    continue
                for u in range(nch):
                    if est[u] < 0.0:
                        continue
                    r = _dup_safe(r_cen, r_half, c0 + u, s_cen, s_half, j, L)
                    if r < est[u]:
                        hm[u] = _heap_insert(hr[u], hc[u], hm[u], r, ns, k)
                        est[u] = _heap_radius(hr[u], hc[u], hm[u], k)
        for u in range(nch):
            rmax[c0 + u] = est[u]
    return rmax


@nb.njit(cache=True)
def _node_to_node(ispl, isrc, r_low, r_chl, r_cen, r_half, s_cbeg, s_cend, s_cen, s_half,
                  s_cnt, rmax, L, early, ordered, upper_only):
    """Count and insert passes; receivers become the children."""
    n_child = r_cen.shape[0]
    counts = np.zeros(n_child, dtype=np.int64)
    out_spl = np.zeros(n_child + 1, dtype=np.int64)
    out_src = np.empty(0, dtype=np.int64)
    out_low = np.empty(0)
    for write in range(2):
        if write == 1:
            for c in range(n_child):
                out_spl[c + 1] = out_spl[c] + counts[c]
            out_src = np.empty(out_spl[n_child], dtype=np.int64)
            out_low = np.empty(out_spl[n_child])
        for p in range(r_chl.shape[0] - 1):
            for c in range(r_chl[p], r_chl[p + 1]):
                R = rmax[c]
                if R < 0.0:
                    continue
                o = 0
                if write == 1:
                    o = out_spl[c]
                cnt = 0
                for t in range(ispl[p], ispl[p + 1]):
                    if early and r_low[t] > R:
                        if ordered:
                            break
                        continue
                    q = isrc[t]
                    for j in range(s_cbeg[q], s_cend[q]):
                        if s_cnt[j] == 0:
                            continue
                        if upper_only and j < c:
                            continue
                        dl = _dlow_safe(r_cen, r_half, c, s_cen, s_half, j, L)
                        if dl <= R:
                            if write == 1:
                                out_src[o + cnt] = j
                                out_low[o + cnt] = dl
                            cnt += 1
                counts[c] = cnt
    return out_spl, out_src, out_low


@nb.njit(cache=True, inline="always")
def _point_box_low(x, cen, half, j, L):
    s = 0.0
    for a in range(x.shape[0]):
        if L[a] > 0.0 and 4.0 * half[j, a] >= L[a]:
            continue
        dc = abs(_wrap(x[a] - cen[j, a], L[a]))
        v = dc - half[j, a] - EPS * (dc + half[j, a] + L[a])
        if v > 0.0:
            s += v * v
    return s


@nb.njit(cache=True)
def _leaf_to_leaf(ispl, isrc, r_low, q_beg, q_end, s_beg, s_end, s_cen, s_half, qx, sx, skey,
                  kk, rmin, kmin, L, early, ordered):
    nq = qx.shape[0]
    d = qx.shape[1]
    idx = np.full((nq, kk), -1, dtype=np.int64)
    dist = np.full((nq, kk), np.inf)
    periodic = False
    for a in range(d):
        if L[a] > 0.0:
            periodic = True
    for leaf in range(q_beg.shape[0]):
        for i in range(q_beg[leaf], q_end[leaf]):
            m = 0
            r0 = rmin[i]
            k0 = kmin[i]
            # squared prefilter on the current k-th distance; exact test follows
            lim2 = np.inf
            xi = qx[i]
            for t in range(ispl[leaf], ispl[leaf + 1]):
                if early and m == kk and r_low[t] > dist[i, kk - 1]:
                    if ordered:
                        break
                    continue
                q = isrc[t]
                if early and m == kk and _point_box_low(xi, s_cen, s_half, q, L) > lim2:
                    continue
                for j in range(s_beg[q], s_end[q]):
                    dd2 = 0.0
                    if periodic:
                        for a in range(d):
                            dx = _wrap(xi[a] - sx[j, a], L[a])
                            dd2 += dx * dx
                    else:
                        for a in range(d):
                            dx = xi[a] - sx[j, a]
                            dd2 += dx * dx
                    if dd2 > lim2:
                        continue
                    dd = math.sqrt(dd2)
                    key = skey[j]
                    if dd < r0 or (dd == r0 and key <= k0):
                        continue
                    if m == kk:
                        dl = dist[i, kk - 1]
                        if dd > dl or (dd == dl and key > idx[i, kk - 1]):
                            continue
                    else:
                        m += 1
                    u = m - 1
                    while u > 0 and (dist[i, u - 1] > dd or (dist[i, u - 1] == dd and idx[i, u - 1] > key)):
                        dist[i, u] = dist[i, u - 1]
                        idx[i, u] = idx[i, u - 1]
                        u -= 1
                    dist[i, u] = dd
                    idx[i, u] = key
                    if m == kk:
                        lim2 = dist[i, kk - 1] * dist[i, kk - 1] * (1.0 + 1e-14)
    return idx, dist


# ----------------------------------------------------------------------------
# python-level passes


@dataclass
class NodeTable:
    """Children of one walk step: geometry, per-role counts and parent ranges."""

    center: np.ndarray
    half: np.ndarray
    count: np.ndarray          # points of the relevant role per node
    parent_beg: np.ndarray     # children of parent q are [parent_beg[q], parent_end[q])
    parent_end: np.ndarray


def find_rmax(il: InteractionList, recv: NodeTable, src: NodeTable, k: int, domain=None,
              n_r: int = N_R, early_exit: bool = True, ordered: bool = True) -> np.ndarray:
    """Upper radius holding the k nearest sources of every point of each receiving child.

    Receiving children without points of the receiving role get -1.
    """
    L = periods(domain, recv.center.shape[1])
    r_chl = np.append(recv.parent_beg, recv.parent_end[-1:]) if len(recv.parent_beg) else np.zeros(1, np.int64)
    return _find_rmax(il.ispl, il.isrc, il.r_low, r_chl, recv.center, recv.half, recv.count,
                      src.parent_beg, src.parent_end, src.center, src.half, src.count,
                      k, n_r, L, early_exit, ordered)


def node_to_node(il: InteractionList, recv: NodeTable, src: NodeTable, rmax: np.ndarray,
                 domain=None, early_exit: bool = True, ordered: bool = True,
                 sort: bool = True, upper_only: bool = False) -> InteractionList:
    """Count, scan and insert the surviving child pairs; optionally sort by r_low."""
    L = periods(domain, recv.center.shape[1])
    r_chl = np.append(recv.parent_beg, recv.parent_end[-1:]) if len(recv.parent_beg) else np.zeros(1, np.int64)
    spl, src_idx, low = _node_to_node(il.ispl, il.isrc, il.r_low, r_chl, recv.center, recv.half,
                                      src.parent_beg, src.parent_end, src.center, src.half,
                                      src.count, rmax, L, early_exit, ordered, upper_only)
    out = InteractionList(src_idx, spl, low)
    return sort_segments(out) if sort else out


def leaf_to_leaf(il: InteractionList, q_beg, q_end, s_beg, s_end, qx, sx, skey, k: int,
                 r_min=None, index_offset=None, domain=None, early_exit: bool = True,
                 ordered: bool = True, s_center=None, s_half=None):
    """Up to k (<= 32) neighbours per query above the (r_min, index_offset) floor."""
    if k > K_MAX:
        raise ValidationError(f"leaf pass handles at most {K_MAX} neighbours, got {k}")
    nq = qx.shape[0]
    L = periods(domain, qx.shape[1])
    r_min = np.full(nq, -1.0) if r_min is None else np.asarray(r_min, np.float64)
    index_offset = np.full(nq, -1, np.int64) if index_offset is None else np.asarray(index_offset, np.int64)
    if s_center is None:
        # unknown leaf geometry: a zero-extent box at the origin with the
        # periodic fallback disables the point-box test entirely
        n_leaf = len(s_beg)
        s_center = np.zeros((n_leaf, qx.shape[1]))
        s_half = np.full((n_leaf, qx.shape[1]), np.inf)
    return _leaf_to_leaf(il.ispl, il.isrc, il.r_low, np.asarray(q_beg, np.int64),
                         np.asarray(q_end, np.int64), np.asarray(s_beg, np.int64),
                         np.asarray(s_end, np.int64), s_center, s_half, qx, sx,
                         np.asarray(skey, np.int64),
                         k, r_min, index_offset, L, early_exit, ordered)


def chunked_leaf_pass(il, q_beg, q_end, s_beg, s_end, qx, sx, skey, k, domain=None,
                      k_max: int = K_MAX, early_exit: bool = True, ordered: bool = True,
                      s_center=None, s_half=None):
    """Run the leaf pass in ceil(k / k_max) chunks, each continuing where the last stopped."""
    nq = qx.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    dist = np.empty((nq, k))
    r_min = np.full(nq, -1.0)
    off = np.full(nq, -1, np.int64)
    for a in range(0, k, k_max):
        kk = min(k_max, k - a)
        ci, cd = leaf_to_leaf(il, q_beg, q_end, s_beg, s_end, qx, sx, skey, kk, r_min, off,
                              domain, early_exit, ordered, s_center, s_half)
        idx[:, a:a + kk] = ci
        dist[:, a:a + kk] = cd
        r_min = cd[:, -1].copy()
        off = ci[:, -1].copy()
    return idx, dist


# ----------------------------------------------------------------------------
# single-rank driver


def plane_tables(h: TreeHierarchy, q_type: int, s_type: int, ngr: int = NGR):
    """Receiver and source tables for every walk step, coarse to fine.

    Step 0 has the super nodes as parents and the coarsest plane as
    children; step j > 0 descends one plane.
    """
    planes = h.coarse_to_fine
    steps = []
    for j, pl in enumerate(planes):
        if j == 0:
            chl = super_node_splits(pl.n_nodes, ngr)
        else:
            chl = planes[j - 1].spl
        beg = np.ascontiguousarray(chl[:-1])
        end = np.ascontiguousarray(chl[1:])
        recv = NodeTable(pl.center, pl.half, np.ascontiguousarray(pl.count[:, q_type]), beg, end)
        src = NodeTable(pl.center, pl.half, np.ascontiguousarray(pl.count[:, s_type]), beg, end)
        steps.append((recv, src))
    return steps


def _walk(h: TreeHierarchy, q_type: int, s_type: int, k: int, L, opts: KnnOptions, rmax_out=None):
    steps = plane_tables(h, q_type, s_type, opts.ngr)
    n_super = len(steps[0][0].parent_beg)
    il = dense_init(n_super)
    for recv, src in steps:
        rmax = find_rmax(il, recv, src, k, L, opts.n_r, opts.early_exit, opts.sort_segments)
        if rmax_out is not None:
            rmax_out.append(rmax)
        il = node_to_node(il, recv, src, rmax, L, opts.early_exit, opts.sort_segments,
                          opts.sort_segments)
    if rmax_out is not None:
        rmax_out.reverse()
    return il


def knn_query(sources, queries=None, k: int = 1, box=None, options: KnnOptions | None = None) -> KnnResult:
    """Exact k nearest sources of every query (queries default to the sources).

    Coincident points are neighbours at distance zero; equal distances are
    ordered by the lower source index of the chosen output numbering.
    """
    opts = options or KnnOptions()
    if opts.order not in ("input", "z"):
        raise ValidationError(f"order must be 'input' or 'z', got {opts.order!r}")
    t0 = time.perf_counter()
    sx_in = sources.positions if isinstance(sources, PointSet) else as_positions(sources)
    if box is None and isinstance(sources, PointSet) and sources.periodic:
        box = sources.box
    d = sx_in.shape[1]
    L = periods(box, d)
    self_query = queries is None
    if not self_query:
        qx_in = queries.positions if isinstance(queries, PointSet) else as_positions(queries)
        if qx_in.shape[1] != d:
            raise ValidationError("queries and sources must share the dimension")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > sx_in.shape[0]:
        raise ValidationError(f"k = {k} exceeds the {sx_in.shape[0]} sources")
    if np.any(L > 0):
        sx_in = wrap_into_box(sx_in, L)
        if not self_query:
            qx_in = wrap_into_box(qx_in, L)
    typed = [sx_in] if self_query else [sx_in, qx_in]
    s_type, q_type = 0, (0 if self_query else 1)

    t1 = time.perf_counter()
    h = build_hierarchy(typed, opts.tree)
    t2 = time.perf_counter()
    rmax_list = [] if opts.keep_rmax else None
    il = _walk(h, q_type, s_type, k, L, opts, rmax_list)
    t3 = time.perf_counter()

    sx = np.ascontiguousarray(h.sorted_points[s_type], dtype=np.float64)
    qx = np.ascontiguousarray(h.sorted_points[q_type], dtype=np.float64)
    s_perm = h.permutations[s_type]
    q_perm = h.permutations[q_type]
    skey = s_perm if opts.order == "input" else np.arange(len(sx), dtype=np.int64)
    s_spl = h.leaf_splits[s_type]
    q_spl = h.leaf_splits[q_type]
    idx, dist = chunked_leaf_pass(il, q_spl[:-1], q_spl[1:], s_spl[:-1], s_spl[1:], qx, sx, skey,
                                  k, L, opts.k_max, opts.early_exit, opts.sort_segments,
                                  h.planes[0].center, h.planes[0].half)
    t4 = time.perf_counter()
    if opts.order == "input":
        out_i = np.empty_like(idx)
        out_d = np.empty_like(dist)
        out_i[q_perm] = idx
        out_d[q_perm] = dist
        idx, dist = out_i, out_d
    t5 = time.perf_counter()
    timings = {"prepare": (t1 - t0) * 1e3, **h.timings, "walk": (t3 - t2) * 1e3,
               "leaf": (t4 - t3) * 1e3, "reorder": (t5 - t4) * 1e3, "total": (t5 - t0) * 1e3}
    return KnnResult(idx, dist, opts.order, timings, rmax_list or [], q_perm, s_perm)
