"""Friends-of-friends groups through a dual walk with label advection.

Labels are indices into the z-ordered array of the current plane (nodes)
or of the points.  A root references itself and every link points the
higher root at the lower one, so after contraction each label is the
minimum index of its component.

Per plane, nodes inherit labels from linked parents, then every surviving
node pair is either discarded (same group, or ``d_low > R_link``), linked
(``d_up <= R_link``) or refined into child pairs for the next plane.  The
leaf plane links point pairs directly.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .bounds import _wrap
from .errors import ValidationError
from .ilist import InteractionList, dense_init, super_node_splits
from .bounds import _dlow_safe, _dup_safe
from .points import PointSet, as_positions, periods, wrap_into_box
from .treebuild import TreeHierarchy, TreeParams, build_hierarchy

NGR = 32
MIN_COUNT = 20


def linking_length(alpha: float, volume: float, n: int) -> float:
    """alpha times the mean interparticle separation."""
    if volume <= 0 or n < 1:
        raise ValidationError("volume must be positive and n >= 1")
    return alpha * (volume / n) ** (1.0 / 3.0)


@dataclass
class FofOptions:
    tree: TreeParams = field(default_factory=TreeParams)
    ngr: int = NGR
    concurrent: bool = False
    n_threads: int = 4


@dataclass
class FofResult:
    igroup: np.ndarray        # contracted labels over z-ordered points
    perm: np.ndarray          # z position -> input index
    r_link: float
    timings: dict = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return int(np.count_nonzero(self.igroup == np.arange(len(self.igroup))))

    def labels_input(self) -> np.ndarray:
        """Per input point, the input index of its group's root point."""
        out = np.empty_like(self.igroup)
        out[self.perm] = self.perm[self.igroup]
        return out

    def z_of_input(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv


# ----------------------------------------------------------------------------
# union-find primitives


@nb.njit(cache=True, inline="always")
def _find(ig, i):
    while ig[i] != i:
        i = ig[i]
    return i


@nb.njit(cache=True, inline="always")
def _link(ig, a, b):
    ra = _find(ig, a)
    rb = _find(ig, b)
    if ra < rb:
        ig[rb] = ra
    elif rb < ra:
        ig[ra] = rb


@nb.njit(cache=True)
def _contract(ig):
    # ig[i] <= i, so ascending order sees every target already contracted
    for i in range(ig.shape[0]):
        ig[i] = ig[ig[i]]


def find_root(labels, i: int) -> int:
    labels = np.asarray(labels)
    while labels[i] != i:
        i = int(labels[i])
    return int(i)


def link(labels, a: int, b: int) -> np.ndarray:
    """Point the higher of the two roots at the lower one (in place)."""
    ig = np.asarray(labels)
    _link(ig, int(a), int(b))
    return ig


def contract(labels) -> np.ndarray:
    """Make every label reference its root directly (in place)."""
    ig = np.asarray(labels)
    if np.any(ig > np.arange(len(ig))):
        # general forests: iterate pointer jumping to the fixed point
        while True:
            nxt = ig[ig]
            if np.array_equal(nxt, ig):
                break
            ig[:] = nxt
        return ig
    _contract(ig)
    return ig


class SharedLabels:
    """Labels updated from several threads through a compare-and-swap."""

    def __init__(self, labels):
        self.ig = np.array(labels, dtype=np.int64)
        self._lock = threading.Lock()
        self.retries = 0

    def cas(self, i: int, expected: int, new: int) -> bool:
        with self._lock:
            if self.ig[i] != expected:
                return False
            self.ig[i] = new
            return True

    def find(self, i: int) -> int:
        ig = self.ig
        while True:
            j = int(ig[i])
            if j == i:
                return i
            i = j

    def link(self, a: int, b: int) -> None:
        while True:
            ra, rb = self.find(a), self.find(b)
            if ra == rb:
                return
            lo, hi = (ra, rb) if ra < rb else (rb, ra)
            if self.cas(hi, hi, lo):
                return
            self.retries += 1


def link_pairs(labels, pairs, n_threads: int = 1) -> np.ndarray:
    """Apply a batch of links; with n_threads > 1 they race through CAS updates."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if n_threads <= 1:
        ig = np.array(labels, dtype=np.int64)
        _link_pairs(ig, pairs)
        return ig
    shared = SharedLabels(labels)
    chunks = np.array_split(np.arange(len(pairs)), n_threads)

    def work(sel):
        for a, b in pairs[sel].tolist():
            shared.link(a, b)

    threads = [threading.Thread(target=work, args=(c,)) for c in chunks]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return shared.ig


@nb.njit(cache=True)
def _link_pairs(ig, pairs):
    for t in range(pairs.shape[0]):
        _link(ig, pairs[t, 0], pairs[t, 1])


# ----------------------------------------------------------------------------
# walk kernels


@nb.njit(cache=True)
def _parent_to_node(parent_ig, parent_flag, cbeg, cend, n_child):
    ig = np.arange(n_child)
    flag = np.zeros(n_child, dtype=np.bool_)
    for p in range(cbeg.shape[0]):
        r = parent_ig[p]
        if parent_flag[r]:
            first = cbeg[r]
            for c in range(cbeg[p], cend[p]):
                ig[c] = first
                flag[c] = True
    return ig, flag


def parent_to_node(parent_labels, parent_splits, linked_flags, n_children: int | None = None):
    """Children of linked parent groups start out in one group.

    Child ``c`` of parent ``P`` receives the first child of ``P``'s root when
    that root is flagged as linked, and itself otherwise.  Returns
    ``(labels, flags)``.
    """
    chl = np.asarray(parent_splits, dtype=np.int64)
    n = int(chl[-1]) if n_children is None else n_children
    return _parent_to_node(np.asarray(parent_labels, np.int64), np.asarray(linked_flags, np.bool_),
                           chl[:-1].copy(), chl[1:].copy(), n)


# Node tables hold the receiving (local) nodes first; source entries past
# them come from elsewhere (remote ranks).  Local pairs are visited once,
# with the source index not below the receiver.


@nb.njit(cache=True)
def _link_pass(ispl, isrc, r_chl, s_cbeg, s_cend, cen, half, ig, flag, R, L, emit):
    """Link node pairs with d_up <= R; returns the pairs instead when ``emit``."""
    buf = np.empty((64, 2), dtype=np.int64)
    m = 0
    for p in range(r_chl.shape[0] - 1):
        for c in range(r_chl[p], r_chl[p + 1]):
            for t in range(ispl[p], ispl[p + 1]):
                q = isrc[t]
                for j in range(max(s_cbeg[q], c), s_cend[q]):
                    if j != c and _find(ig, c) == _find(ig, j):
                        continue
                    if _dlow_safe(cen, half, c, cen, half, j, L) > R:
                        continue
                    if _dup_safe(cen, half, c, cen, half, j, L) <= R:
                        flag[c] = True
                        flag[j] = True
                        if j == c:
                            continue
                        if emit:
                            if m == buf.shape[0]:
                                grown = np.empty((2 * m, 2), dtype=np.int64)
                                grown[:m] = buf
                                buf = grown
                            buf[m, 0] = c
                            buf[m, 1] = j
                            m += 1
                        else:
                            _link(ig, c, j)
    return buf[:m].copy()


@nb.njit(cache=True)
def _refine_pass(ispl, isrc, r_chl, s_cbeg, s_cend, cen, half, ig, gflag, R, L):
    """Count and insert the pairs that need the next plane."""
    n_recv = r_chl[r_chl.shape[0] - 1]
    counts = np.zeros(n_recv, dtype=np.int64)
    out_spl = np.zeros(n_recv + 1, dtype=np.int64)
    out_src = np.empty(0, dtype=np.int64)
    for write in range(2):
        if write == 1:
            for c in range(n_recv):
                out_spl[c + 1] = out_spl[c] + counts[c]
            out_src = np.empty(out_spl[n_recv], dtype=np.int64)
        for p in range(r_chl.shape[0] - 1):
            for c in range(r_chl[p], r_chl[p + 1]):
                cnt = 0
                rc = ig[c]
                for t in range(ispl[p], ispl[p + 1]):
                    q = isrc[t]
                    for j in range(max(s_cbeg[q], c), s_cend[q]):
                        if ig[j] == rc and (j != c or gflag[rc]):
                            continue
                        if _dlow_safe(cen, half, c, cen, half, j, L) > R:
                            continue
                        if j != c and _dup_safe(cen, half, c, cen, half, j, L) <= R:
                            continue
                        if write == 1:
                            out_src[out_spl[c] + cnt] = j
                        cnt += 1
                counts[c] = cnt
    return out_spl, out_src


@nb.njit(cache=True)
def _point_pass(ispl, isrc, p_beg, p_end, x, ig, R, L, emit):
    d = x.shape[1]
    R2 = R * R * (1.0 + 1e-14)
    buf = np.empty((64, 2), dtype=np.int64)
    m = 0
    for c in range(ispl.shape[0] - 1):
        for t in range(ispl[c], ispl[c + 1]):
            q = isrc[t]
            for i in range(p_beg[c], p_end[c]):
                for j in range(max(p_beg[q], i + 1), p_end[q]):
                    s = 0.0
                    for a in range(d):
                        dx = _wrap(x[i, a] - x[j, a], L[a])
                        s += dx * dx
                    if s > R2 or math.sqrt(s) > R:
                        continue
                    if emit:
                        if m == buf.shape[0]:
                            grown = np.empty((2 * m, 2), dtype=np.int64)
                            grown[:m] = buf
                            buf = grown
                        buf[m, 0] = i
                        buf[m, 1] = j
                        m += 1
                    else:
                        _link(ig, i, j)
    return buf[:m].copy()


@nb.njit(cache=True)
def _group_flags(ig, flag):
    g = np.zeros(ig.shape[0], dtype=np.bool_)
    for i in range(ig.shape[0]):
        if flag[i]:
            g[ig[i]] = True
    return g


# ----------------------------------------------------------------------------
# driver


def fof_node_interaction(c1, h1, c2, h2, same_root: bool, r_link: float, box=None) -> str:
    """Classify one node pair as 'discard', 'link' or 'refine'."""
    c1, h1, c2, h2 = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (c1, h1, c2, h2))
    L = periods(box, c1.shape[1])
    if same_root:
        return "discard"
    if _dlow_safe(c1, h1, 0, c2, h2, 0, L) > r_link:
        return "discard"
    if _dup_safe(c1, h1, 0, c2, h2, 0, L) <= r_link:
        return "link"
    return "refine"


def apply_links(ig, pairs, n_threads: int = 1):
    if len(pairs):
        ig[:] = link_pairs(ig, pairs, n_threads)


@dataclass
class FofStep:
    """One walk step: local receiving parents, source parents and the child table."""

    r_chl: np.ndarray      # receiving parent -> local children
    s_cbeg: np.ndarray     # source parent -> children in the table
    s_cend: np.ndarray
    center: np.ndarray     # child table, local children first
    half: np.ndarray


def node_step(il: InteractionList, step: FofStep, ig, flag, r_link, L, opts: FofOptions):
    """Link, contract, then keep the pairs to refine.  Updates ``ig``/``flag`` in place."""
    pairs = _link_pass(il.ispl, il.isrc, step.r_chl, step.s_cbeg, step.s_cend, step.center,
                       step.half, ig, flag, r_link, L, opts.concurrent)
    apply_links(ig, pairs, opts.n_threads)
    _contract(ig)
    gflag = _group_flags(ig, flag)
    spl, src = _refine_pass(il.ispl, il.isrc, step.r_chl, step.s_cbeg, step.s_cend, step.center,
                            step.half, ig, gflag, r_link, L)
    return InteractionList(src, spl, np.zeros(len(src)))


def point_step(il: InteractionList, p_beg, p_end, x, ig, r_link, L, opts: FofOptions):
    pairs = _point_pass(il.ispl, il.isrc, p_beg, p_end, x, ig, r_link, L, opts.concurrent)
    apply_links(ig, pairs, opts.n_threads)
    _contract(ig)


def fof_walk(h: TreeHierarchy, r_link: float, L: np.ndarray, opts: FofOptions) -> np.ndarray:
    """Contracted point labels (z order) of a single-type hierarchy."""
    planes = h.coarse_to_fine
    chl = super_node_splits(planes[0].n_nodes, opts.ngr)
    il = dense_init(len(chl) - 1)
    ig = flag = None
    for pl in planes:
        beg, end = chl[:-1].copy(), chl[1:].copy()
        if ig is None:
            ig = np.arange(pl.n_nodes)
            flag = np.zeros(pl.n_nodes, dtype=np.bool_)
        else:
            ig, flag = _parent_to_node(ig, _group_flags(ig, flag), beg, end, pl.n_nodes)
        il = node_step(il, FofStep(chl, beg, end, pl.center, pl.half), ig, flag, r_link, L, opts)
        chl = pl.spl
    beg, end = chl[:-1].copy(), chl[1:].copy()
    pts, _ = _parent_to_node(ig, _group_flags(ig, flag), beg, end, h.x.shape[0])
    point_step(il, beg, end, h.x, pts, r_link, L, opts)
    return pts


def fof(points, r_link: float, box=None, options: FofOptions | None = None) -> FofResult:
    """Groups of points connected by chains of pairs no farther apart than r_link."""
    opts = options or FofOptions()
    if not r_link > 0 or not math.isfinite(r_link):
        raise ValidationError("r_link must be positive and finite")
    t0 = time.perf_counter()
    x = points.positions if isinstance(points, PointSet) else as_positions(points)
    if box is None and isinstance(points, PointSet) and points.periodic:
        box = points.box
    L = periods(box, x.shape[1])
    if np.any(L > 0):
        x = wrap_into_box(x, L)
    h = build_hierarchy([x], opts.tree)
    t1 = time.perf_counter()
    ig = fof_walk(h, float(r_link), L, opts)
    t2 = time.perf_counter()
    timings = {"prepare": (t1 - t0) * 1e3 - sum(h.timings.values()), **h.timings,
               "walk": (t2 - t1) * 1e3, "total": (t2 - t0) * 1e3}
    return FofResult(ig, h.perm, float(r_link), timings)


# ----------------------------------------------------------------------------
# group order and catalogue


def group_order_sort(labels) -> np.ndarray:
    """Stable sort by root label: groups become contiguous, z order kept inside."""
    return np.argsort(np.asarray(labels), kind="stable")


@dataclass
class CatalogueEntry:
    group_id: int
    count: int
    mass: float
    com: np.ndarray
    com_velocity: np.ndarray | None
    inertia_radius: float


def reduce_catalogue(positions, labels, masses=None, velocities=None, min_count: int = MIN_COUNT,
                     box=None) -> list[CatalogueEntry]:
    """Per-group count, mass, centre of mass, mean velocity and inertia radius.

    The inertia radius is the mass-weighted RMS distance from the centre of
    mass.  Periodic groups are unwrapped around their first point; a group
    spanning half a period or more in some dimension is rejected.
    """
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    n, d = x.shape
    m = np.ones(n) if masses is None else np.asarray(masses, dtype=np.float64)
    v = None if velocities is None else np.asarray(velocities, dtype=np.float64).reshape(n, d)
    P = periods(box, d)
    order = group_order_sort(labels)
    lab = labels[order]
    cuts = np.flatnonzero(np.diff(lab)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [n]])
    out = []
    for a, b in zip(starts.tolist(), ends.tolist()):
        cnt = b - a
        if cnt < min_count:
            continue
        sel = order[a:b]
        xs = x[sel]
        ms = m[sel]
        if np.any(P > 0):
            dx = xs - xs[0]
            per = P > 0
            dx[:, per] -= P[per] * np.floor(dx[:, per] / P[per] + 0.5)
            xs = xs[0] + dx
            span = xs.max(axis=0) - xs.min(axis=0)
            if np.any(span[per] >= 0.5 * P[per]):
                raise ValidationError(f"group {lab[a]} spans half the periodic box; centre of mass is ambiguous")
        mass = float(ms.sum())
        if not mass > 0:
            raise ValidationError(f"group {lab[a]} has nonpositive mass")
        com = (ms[:, None] * xs).sum(axis=0) / mass
        r2 = (ms * ((xs - com) ** 2).sum(axis=1)).sum() / mass
        if np.any(P > 0):
            per = P > 0
            com[per] = np.mod(com[per], P[per])
            com[per & (com >= P)] = 0.0
        cv = None if v is None else (ms[:, None] * v[sel]).sum(axis=0) / mass
        out.append(CatalogueEntry(int(lab[a]), cnt, mass, com, cv, float(math.sqrt(r2))))
    return out


def catalogue(points: PointSet, result: FofResult, min_count: int = MIN_COUNT) -> list[CatalogueEntry]:
    """Catalogue of a fof result; group ids are z-order root indices."""
    perm = result.perm
    x = points.positions[perm]
    m = None if points.masses is None else points.masses[perm]
    v = None if points.velocities is None else points.velocities[perm]
    box = points.box if points.periodic else None
    if box is not None:
        x = wrap_into_box(x, box)
    return reduce_catalogue(x, result.igroup, m, v, min_count, box)
