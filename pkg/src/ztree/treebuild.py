"""Bottom-up construction of the plane-based tree hierarchy.

Points of all types are z-sorted jointly.  Each gap between consecutive
sorted points gets the Morton level of the pair and the population ``n`` of
the smallest Morton cell holding both.  A tree-plane keeps every gap whose
``n`` exceeds that plane's ``n_max`` (or whose level exceeds the
regularization cap), coarser planes selecting from the splits of finer ones.

Plane ``p = 0`` is the leaf plane; ``planes[-1]`` is the coarsest.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import ValidationError
from .points import as_positions
from .zorder import LEVEL_MIN, ZKeys, _morton_level, z_sort

BIG_COUNT = np.iinfo(np.int64).max // 4


@dataclass
class TreeParams:
    n_max0: int = 48
    c: int = 8
    n_target: int = 1000
    f_max: float = 50.0

    def n_max(self, p: int) -> int:
        return self.n_max0 * self.c ** p


@dataclass
class TreePlane:
    spl: np.ndarray          # node bounds in the finer plane (points for p = 0)
    start: np.ndarray        # node bounds in the joint sorted point array
    count: np.ndarray        # (n_nodes, n_types)
    level: np.ndarray
    center: np.ndarray
    half: np.ndarray         # half extents
    n_max: int
    lvl_max: int | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.spl) - 1


@dataclass
class TreeHierarchy:
    planes: list             # planes[0] = leaves
    x: np.ndarray            # joint z-sorted positions (float64)
    types: np.ndarray        # type tag per sorted point
    perm: np.ndarray         # sorted position -> index in the concatenated input
    type_offsets: np.ndarray
    gap_level: np.ndarray    # N + 1 pair levels
    gap_n: np.ndarray        # N + 1 max-per-type cell populations
    params: TreeParams
    emax: int
    sorted_points: list = field(default_factory=list)
    permutations: list = field(default_factory=list)   # per type, into that type's input
    leaf_splits: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)        # ms for "sort" and "tree"

    @property
    def n_types(self) -> int:
        return len(self.type_offsets) - 1

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def coarse_to_fine(self) -> list:
        return self.planes[::-1]


# ----------------------------------------------------------------------------
# scalar helpers


def morton_level(p, q) -> int:
    """Morton level of the smallest cell holding both points."""
    x = as_positions(np.stack([np.atleast_1d(p), np.atleast_1d(q)]))
    return ZKeys(x).level(0, 1)


def extent_levels(lvl: int, d: int) -> list[int]:
    """Per-dimension extent exponents; they sum to ``lvl`` and differ by <= 1."""
    return [(lvl + i) // d for i in range(d)]


def sentinel_level(d: int, emax: int) -> int:
    """Level of a gap against the -inf / +inf guard points."""
    return (emax + 1) * d


def node_box(anchor, lvl: int, emax: int = 1024):
    """Center and half extent of the dyadic cell at ``lvl`` holding ``anchor``."""
    a = np.ascontiguousarray(np.atleast_2d(np.asarray(anchor, dtype=np.float64)))
    c, h = _node_boxes(a, np.zeros(1, np.int64), np.array([lvl], np.int64), emax)
    return c[0], h[0]


# ----------------------------------------------------------------------------
# kernels


@nb.njit(cache=True)
def _gap_levels(K, mant_bits, bias, emax, mag_mask, left, right):
    n = K.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    out[0] = left
    out[n] = right
    for i in range(1, n):
        out[i] = _morton_level(K, i - 1, i, mant_bits, bias, emax, mag_mask)
    return out


@nb.njit(cache=True)
def _node_ranges(lvl):
    """Nearest strictly-higher gap on each side of every interior gap.

    Equivalent to the two binary searches on point levels: the cell of gap
    i spans points [lb, rb).  ``ext_*`` flags gaps whose cell reaches the
    array edge without meeting a higher gap.
    """
    n = lvl.shape[0] - 1
    lb = np.zeros(n + 1, dtype=np.int64)
    rb = np.full(n + 1, n, dtype=np.int64)
    ext_l = np.zeros(n + 1, dtype=np.bool_)
    ext_r = np.zeros(n + 1, dtype=np.bool_)
    stack = np.empty(n + 1, dtype=np.int64)
    top = 0
    stack[0] = 0
    for i in range(1, n):
        while top >= 0 and lvl[stack[top]] <= lvl[i]:
            top -= 1
        if top >= 0:
            lb[i] = stack[top]
        else:
            ext_l[i] = True
        top += 1
        stack[top] = i
    top = 0
    stack[0] = n
    for i in range(n - 1, 0, -1):
        while top >= 0 and lvl[stack[top]] <= lvl[i]:
            top -= 1
        if top >= 0:
            rb[i] = stack[top]
        else:
            ext_r[i] = True
        top += 1
        stack[top] = i
    return lb, rb, ext_l, ext_r


@nb.njit(cache=True)
def _node_levels(K, start, mant_bits, bias, emax, mag_mask):
    m = start.shape[0] - 1
    out = np.empty(m, dtype=np.int64)
    for j in range(m):
        a = start[j]
        b = start[j + 1] - 1
        if b <= a:
            out[j] = LEVEL_MIN
        else:
            out[j] = _morton_level(K, a, b, mant_bits, bias, emax, mag_mask)
    return out


@nb.njit(cache=True)
def _node_boxes(X, anchor, level, emax):
    m = anchor.shape[0]
    d = X.shape[1]
    center = np.empty((m, d), dtype=np.float64)
    half = np.empty((m, d), dtype=np.float64)
    two52 = 4503599627370496.0
    for j in range(m):
        lvl = level[j]
        for i in range(d):
            x = X[anchor[j], i]
            if lvl == LEVEL_MIN:
                center[j, i] = x
                half[j, i] = 0.0
                continue
            li = (lvl + i) // d
            if li > emax:
                center[j, i] = 0.0
                half[j, i] = np.inf
                continue
            h = math.ldexp(1.0, li - 1)
            a = abs(x)
            s = math.ldexp(a, -li)
            if s >= two52:
                # cell finer than the float spacing at x
                c = a
            else:
                c = math.ldexp(math.floor(s), li) + h
            center[j, i] = -c if x < 0 else c
            half[j, i] = h
    return center, half


@nb.njit(cache=True)
def _windowed_split(lvl, types, n_types, n_max, i):
    """Whether the cell of gap i holds more than n_max points of some type."""
    n = lvl.shape[0] - 1
    cnt = np.zeros(n_types, dtype=np.int64)
    li = lvl[i]
    # left: points i-1, i-2, ... while the gap to their right is inside the cell
    j = i - 1
    while True:
        cnt[types[j]] += 1
        if cnt[types[j]] > n_max:
            return True
        if j == 0 or lvl[j] > li:
            break
        j -= 1
    j = i
    while j < n:
        cnt[types[j]] += 1
        if cnt[types[j]] > n_max:
            return True
        if lvl[j + 1] > li:
            break
        j += 1
    return False


@nb.njit(cache=True)
def _windowed_splits(lvl, types, n_types, n_max):
    n = lvl.shape[0] - 1
    keep = np.zeros(n + 1, dtype=np.bool_)
    keep[0] = True
    keep[n] = True
    for i in range(1, n):
        keep[i] = _windowed_split(lvl, types, n_types, n_max, i)
    return keep


# ----------------------------------------------------------------------------
# gap statistics


def pair_levels(sorted_positions, left: int | None = None, right: int | None = None) -> np.ndarray:
    """N + 1 gap levels of z-sorted positions, guard values at both ends."""
    x = as_positions(sorted_positions)
    k = ZKeys(x)
    sent = sentinel_level(x.shape[1], k.fmt.emax)
    left = sent if left is None else left
    right = sent if right is None else right
    return _gap_levels(k.K, *k.args, left, right)


@dataclass
class NodeRange:
    l_b: int
    r_b: int

    @property
    def n(self) -> int:
        return self.r_b - self.l_b


def node_range(levels: np.ndarray, sorted_positions, i: int) -> NodeRange:
    """Binary searches for the point range of the smallest cell around gap i."""
    x = as_positions(sorted_positions)
    keys = ZKeys(x)
    n = x.shape[0]
    li = int(levels[i])
    # smallest l_b in [0, i-1] with level(x[l_b], x[i]) <= li (monotone in l_b)
    lo, hi = 0, i - 1
    l_b = 0
    found = False
    while lo <= hi:
        mid = (lo + hi) // 2
        if keys.level(mid, i) <= li:
            l_b = mid
            found = True
            hi = mid - 1
        else:
            lo = mid + 1
    if not found:
        l_b = 0
    # smallest r_b in [i, n-1] with level(x[i-1], x[r_b]) > li
    lo, hi = i, n - 1
    r_b = n
    while lo <= hi:
        mid = (lo + hi) // 2
        if keys.level(i - 1, mid) > li:
            r_b = mid
            hi = mid - 1
        else:
            lo = mid + 1
    return NodeRange(l_b, r_b)


def gap_populations(levels: np.ndarray, types: np.ndarray, n_types: int,
                    left_open: bool = False, right_open: bool = False):
    """Max-per-type population of the cell around each gap.

    Gaps whose cell runs into an open edge (a neighbouring rank) get
    BIG_COUNT so they stay splits on every plane.
    """
    lb, rb, ext_l, ext_r = _node_ranges(levels)
    n = len(levels) - 1
    cum = np.zeros((n + 1, n_types), dtype=np.int64)
    if n:
        np.cumsum(np.eye(n_types, dtype=np.int64)[types], axis=0, out=cum[1:])
    pop = (cum[rb] - cum[lb]).max(axis=1)
    if left_open:
        pop[ext_l] = BIG_COUNT
    if right_open:
        pop[ext_r] = BIG_COUNT
    pop[0] = BIG_COUNT
    pop[n] = BIG_COUNT
    return pop, lb, rb


def select_splits(candidates: np.ndarray, gap_n: np.ndarray, gap_level: np.ndarray,
                  n_max: int, lvl_max: int | None = None) -> np.ndarray:
    """Candidate gap indices kept on a plane; both boundaries always survive.

    Returns positions within ``candidates``.
    """
    keep = gap_n[candidates] > n_max
    if lvl_max is not None:
        keep |= gap_level[candidates] > lvl_max
    keep[0] = True
    keep[-1] = True
    return np.flatnonzero(keep)


def windowed_leaf_splits(levels, types, n_types: int, n_max: int) -> np.ndarray:
    """Leaf split gaps found by a bounded scan around every gap."""
    keep = _windowed_splits(np.asarray(levels, np.int64), np.asarray(types, np.int64), n_types, n_max)
    return np.flatnonzero(keep)


# ----------------------------------------------------------------------------
# regularization


def level_histogram(levels: np.ndarray, counts: np.ndarray) -> dict:
    """Points per node level; volumes are exact powers of two so this is exact."""
    hist: dict[int, int] = {}
    u, inv = np.unique(levels, return_inverse=True)
    sums = np.zeros(len(u), dtype=np.int64)
    np.add.at(sums, inv.ravel(), np.asarray(counts, dtype=np.int64))
    for lv, s in zip(u.tolist(), sums.tolist()):
        hist[int(lv)] = hist.get(int(lv), 0) + int(s)
    return hist


def merge_histograms(hists) -> dict:
    out: dict[int, int] = {}
    for h in hists:
        for k, v in h.items():
            out[k] = out.get(k, 0) + v
    return out


def lvl_max_from_histogram(hist: dict, f_max: float) -> int | None:
    """Largest level whose volume stays below f_max times V_90%."""
    if not math.isfinite(f_max):
        return None
    items = sorted((k, v) for k, v in hist.items() if v > 0)
    total = sum(v for _, v in items)
    if total == 0:
        return None
    chosen = []
    cum = 0
    for lv, v in items:
        chosen.append((lv, v))
        cum += v
        if 10 * cum >= 9 * total:
            break
    weight = sum(v for _, v in chosen)
    vol = [(lv, v) for lv, v in chosen if lv != LEVEL_MIN]
    if not vol:
        return LEVEL_MIN
    top = max(lv for lv, _ in vol)
    s = sum(v * 2.0 ** (lv - top) for lv, v in vol)
    log2_v90 = math.log2(s) + top - math.log2(weight)
    return int(math.floor(math.log2(f_max) + log2_v90))


def regularization_level(plane: TreePlane, f_max: float = 50.0) -> int | None:
    return lvl_max_from_histogram(level_histogram(plane.level, plane.count.sum(axis=1)), f_max)


# ----------------------------------------------------------------------------
# builder


class TreeBuilder:
    """Plane-by-plane construction over one contiguous run of z-sorted points.

    The plane schedule and regularization caps may come from outside (the
    rank simulator feeds global values); ``build_hierarchy`` drives it for
    the single-rank case.
    """

    def __init__(self, x: np.ndarray, types: np.ndarray, n_types: int, params: TreeParams,
                 n_total: int | None = None, left_level: int | None = None,
                 right_level: int | None = None):
        self.x_native = x
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.types = np.ascontiguousarray(types, dtype=np.int64)
        self.n_types = n_types
        self.params = params
        self.n = x.shape[0]
        self.n_total = self.n if n_total is None else n_total
        self.keys = ZKeys(x)
        self.emax = self.keys.fmt.emax
        d = x.shape[1]
        sent = sentinel_level(d, self.emax)
        self.left_open = left_level is not None
        self.right_open = right_level is not None
        k = self.keys
        self.gap_level = _gap_levels(k.K, *k.args,
                                     sent if left_level is None else left_level,
                                     sent if right_level is None else right_level)
        self.gap_n, _, _ = gap_populations(self.gap_level, self.types, n_types,
                                           self.left_open, self.right_open)
        self.cum = np.zeros((self.n + 1, n_types), dtype=np.int64)
        if self.n:
            np.cumsum(np.eye(n_types, dtype=np.int64)[self.types], axis=0, out=self.cum[1:])
        self.planes: list[TreePlane] = []
        self._gaps = [np.arange(self.n + 1)]   # split gaps per plane (point indices)

    def candidate_splits(self, p: int) -> np.ndarray:
        prev = np.arange(self.n + 1) if p == 0 else self._gaps[-1]
        sel = select_splits(prev, self.gap_n, self.gap_level, self.params.n_max(p))
        return prev[sel]

    def node_stats(self, gaps: np.ndarray):
        k = self.keys
        levels = _node_levels(k.K, gaps, *k.args)
        counts = self.cum[gaps[1:]] - self.cum[gaps[:-1]]
        return levels, counts

    def candidate_histogram(self, p: int) -> dict:
        levels, counts = self.node_stats(self.candidate_splits(p))
        return level_histogram(levels, counts.sum(axis=1))

    def finalize_plane(self, p: int, lvl_max: int | None) -> TreePlane:
        n_max = self.params.n_max(p)
        prev = np.arange(self.n + 1) if p == 0 else self._gaps[-1]
        sel = select_splits(prev, self.gap_n, self.gap_level, n_max, lvl_max)
        gaps = prev[sel]
        if p == 0:
            spl = gaps.copy()
        else:
            spl = np.searchsorted(prev, gaps)
        levels, counts = self.node_stats(gaps)
        center, half = _node_boxes(self.x, gaps[:-1].copy(), levels, self.emax)
        plane = TreePlane(spl=spl, start=gaps, count=counts, level=levels, center=center,
                          half=half, n_max=n_max, lvl_max=lvl_max)
        self.planes.append(plane)
        self._gaps.append(gaps)
        return plane

    def should_stop(self, p: int, n_nodes_total: int) -> bool:
        estimate = self.n_total / (self.params.n_max(p) / 2.0)
        return estimate < self.params.n_target or n_nodes_total <= 1


def _split_types(typed_points):
    if isinstance(typed_points, np.ndarray) or hasattr(typed_points, "positions"):
        typed_points = [typed_points]
    arrays = []
    for t in typed_points:
        arr = t.positions if hasattr(t, "positions") else as_positions(t)
        arrays.append(arr)
    if not arrays:
        raise ValidationError("need at least one point type")
    d = arrays[0].shape[1]
    if any(a.shape[1] != d for a in arrays):
        raise ValidationError("all point types must share the dimension")
    if any(a.shape[0] == 0 for a in arrays):
        raise ValidationError("every point type must be nonempty")
    dtype = np.result_type(*[a.dtype for a in arrays])
    return [a.astype(dtype, copy=False) for a in arrays]


def assemble(builder: TreeBuilder, perm: np.ndarray, type_offsets: np.ndarray) -> TreeHierarchy:
    """Wrap a finished builder into a TreeHierarchy with per-type views."""
    h = TreeHierarchy(planes=builder.planes, x=builder.x, types=builder.types, perm=perm,
                      type_offsets=type_offsets, gap_level=builder.gap_level,
                      gap_n=builder.gap_n, params=builder.params, emax=builder.emax)
    leaf_start = builder.planes[0].start
    for t in range(builder.n_types):
        mask = builder.types == t
        h.sorted_points.append(builder.x[mask])
        h.permutations.append(perm[mask] - type_offsets[t])
        h.leaf_splits.append(builder.cum[leaf_start, t].copy())
    return h


def build_hierarchy(typed_points, params: TreeParams | None = None) -> TreeHierarchy:
    """Joint z-sort of all point types followed by plane construction."""
    params = params or TreeParams()
    if params.n_max0 < 1 or params.c < 2 or params.n_target < 1:
        raise ValidationError(f"invalid tree parameters {params}")
    arrays = _split_types(typed_points)
    type_offsets = np.concatenate([[0], np.cumsum([a.shape[0] for a in arrays])]).astype(np.int64)
    x_all = np.ascontiguousarray(np.concatenate(arrays, axis=0))
    tags = np.repeat(np.arange(len(arrays)), np.diff(type_offsets))
    t0 = time.perf_counter()
    perm = z_sort(x_all)
    xs = np.ascontiguousarray(x_all[perm])
    t1 = time.perf_counter()
    builder = TreeBuilder(xs, tags[perm], len(arrays), params)
    p = 0
    while True:
        lvl_max = lvl_max_from_histogram(builder.candidate_histogram(p), params.f_max)
        plane = builder.finalize_plane(p, lvl_max)
        if builder.should_stop(p, plane.n_nodes):
            break
        p += 1
    h = assemble(builder, perm, type_offsets)
    h.timings = {"sort": (t1 - t0) * 1e3, "tree": (time.perf_counter() - t1) * 1e3}
    return h
