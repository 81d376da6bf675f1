"""Deterministic in-process simulation of the multi-rank algorithms.

Ranks are plain objects that only exchange data through a round-based
mailbox.  Each operation runs in supersteps: every rank posts its
messages, the mailbox delivers them (ordered by sender, then send order),
and every rank processes its inbox.

Pipeline: partitioned z-sort -> domain adjustment (no coarse node crosses
a rank boundary) -> local trees built with globally agreed plane count and
regularization -> distributed kNN / FoF, where remote nodes enter the walk
through origin records and are fetched once per plane.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, ValidationError
from .fof import (FofOptions, FofStep, MIN_COUNT, _contract, _group_flags, _link_pairs,
                  _parent_to_node, node_step, point_step, reduce_catalogue)
from .ilist import InteractionList, super_node_splits
from .knn import KnnOptions, KnnResult, NodeTable, chunked_leaf_pass, find_rmax, node_to_node
from .points import as_positions, periods, wrap_into_box
from .treebuild import (TreeBuilder, TreeHierarchy, TreeParams, _node_ranges, assemble,
                        lvl_max_from_histogram, merge_histograms, sentinel_level)
from .zorder import ZKeys, splitter_ranks, splitters_from_sample, z_sort


@dataclass(frozen=True, order=True)
class GlobalLabel:
    rank: int
    index: int


@dataclass(frozen=True)
class PendingEdge:
    """Point ``(rank_a, idx_a)`` belongs to the group of ``(rank_b, idx_b)``.

    ``span`` > 1 says the ``span`` points starting at ``idx_a`` (one remote
    node) are already known to be connected to each other.
    """

    rank_a: int
    idx_a: int
    rank_b: int
    idx_b: int
    span: int = 1


@dataclass
class Message:
    src: int
    dst: int
    kind: str
    payload: object


class Mailbox:
    """Round-based delivery with per-kind counters."""

    def __init__(self, n_ranks: int):
        self.n_ranks = n_ranks
        self.queue: list[Message] = []
        self.counters: Counter = Counter()
        self.requests: Counter = Counter()
        self.rounds = 0

    def send(self, src: int, dst: int, kind: str, payload) -> None:
        if not (0 <= dst < self.n_ranks and 0 <= src < self.n_ranks):
            raise ProtocolError(f"undeliverable message {kind!r} from {src} to {dst}")
        self.queue.append(Message(src, dst, kind, payload))
        self.counters[kind] += 1

    def deliver(self) -> list[list[Message]]:
        inbox: list[list[Message]] = [[] for _ in range(self.n_ranks)]
        for m in sorted(self.queue, key=lambda m: m.src):   # stable: send order within a sender
            inbox[m.dst].append(m)
        self.queue = []
        self.rounds += 1
        return inbox

    def allgather(self, kind: str, values: list) -> list:
        for src, v in enumerate(values):
            for dst in range(self.n_ranks):
                self.send(src, dst, kind, v)
        inbox = self.deliver()
        views = [[m.payload for m in box if m.kind == kind] for box in inbox]
        return views[0]

    def new_operation(self) -> None:
        """Remote requests are counted per walk; start a fresh count."""
        self.requests.clear()

    def note_request(self, tag) -> None:
        self.requests[tag] += 1
        if self.requests[tag] > 1:
            raise ProtocolError(f"duplicate remote request {tag}")


@dataclass
class RankState:
    rank: int
    x: np.ndarray                 # local z-sorted positions, all types
    types: np.ndarray
    gid: np.ndarray               # index into the concatenated input
    masses: np.ndarray | None = None
    velocities: np.ndarray | None = None
    tree: TreeHierarchy | None = None
    left_level: int | None = None
    right_level: int | None = None
    labels: np.ndarray | None = None
    pending: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class Cluster:
    states: list
    net: Mailbox
    splitters: np.ndarray
    box: np.ndarray
    n_types: int
    type_counts: np.ndarray
    params: TreeParams = field(default_factory=TreeParams)
    imbalance: float = 0.0
    boundaries: list = field(default_factory=list)
    unadjusted: list = field(default_factory=list)   # boundaries left inside a node

    @property
    def n_ranks(self) -> int:
        return len(self.states)

    def type_offsets(self, t: int) -> np.ndarray:
        """Global offset of rank r's type-t points in the type's z order."""
        counts = [int(np.count_nonzero(s.types == t)) for s in self.states]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([s.n for s in self.states])]).astype(np.int64)


# ----------------------------------------------------------------------------
# partitioning


def partitioned_zsort(typed_points, n_ranks: int, n_samp: int = 1000, seed: int = 0, box=None,
                      masses=None, velocities=None, params: TreeParams | None = None) -> Cluster:
    """Sample-sort the concatenated point types over ``n_ranks`` simulated ranks.

    Input starts as contiguous slices on the ranks; each rank contributes a
    seeded local sample, splitters are chosen from the gathered sample, and
    points travel to the rank owning their z-order interval.
    """
    if n_ranks < 1:
        raise ValidationError("n_ranks must be >= 1")
    if isinstance(typed_points, np.ndarray) or not isinstance(typed_points, (list, tuple)):
        typed_points = [typed_points]
    arrays = [as_positions(getattr(t, "positions", t)) for t in typed_points]
    d = arrays[0].shape[1]
    L = periods(box, d)
    if np.any(L > 0):
        arrays = [wrap_into_box(a, L) for a in arrays]
    x = np.ascontiguousarray(np.concatenate(arrays))
    n = x.shape[0]
    if n < n_ranks:
        raise ValidationError(f"{n} points cannot fill {n_ranks} ranks")
    tags = np.repeat(np.arange(len(arrays)), [a.shape[0] for a in arrays])
    m = None if masses is None else np.asarray(masses, np.float64).reshape(n)
    v = None if velocities is None else np.asarray(velocities, np.float64).reshape(n, d)
    net = Mailbox(n_ranks)
    slices = np.array_split(np.arange(n), n_ranks)

    # seeded local samples, gathered everywhere
    per_rank = max(1, n_samp // n_ranks)
    samples = []
    for r, sl in enumerate(slices):
        rng = np.random.default_rng([seed, r])
        samples.append(x[sl][rng.integers(0, len(sl), size=per_rank)] if len(sl) else x[:0])
    gathered = net.allgather("sample", samples)
    splitters = splitters_from_sample(np.concatenate(gathered), n_ranks) if n_ranks > 1 else x[:0]

    for r, sl in enumerate(slices):
        dest = splitter_ranks(x[sl], splitters) if n_ranks > 1 else np.zeros(len(sl), np.int64)
        for q in range(n_ranks):
            sel = sl[dest == q]
            net.send(r, q, "points", (sel, x[sel], tags[sel]))
    inbox = net.deliver()
    states = []
    for r in range(n_ranks):
        parts = [msg.payload for msg in inbox[r]]
        gid = np.concatenate([p[0] for p in parts])
        xr = np.ascontiguousarray(np.concatenate([p[1] for p in parts]))
        tr = np.concatenate([p[2] for p in parts])
        order = z_sort(xr)
        gid = gid[order]
        states.append(RankState(r, np.ascontiguousarray(xr[order]), tr[order], gid,
                                None if m is None else m[gid], None if v is None else v[gid]))
    sizes = np.array([s.n for s in states])
    cl = Cluster(states, net, splitters, L, len(arrays), np.array([a.shape[0] for a in arrays]),
                 params or TreeParams(), float(sizes.max() / sizes.mean() - 1.0))
    return cl


def coarsest_n_max(n_total: int, params: TreeParams) -> int:
    """N_max of the last plane the schedule can reach for n_total points."""
    p = 0
    while n_total / (params.n_max(p) / 2.0) >= params.n_target:
        p += 1
    return params.n_max(p)


def _boundary_shift(window: np.ndarray, types: np.ndarray, n_types: int, b: int, n_max: int) -> int:
    """New boundary gap inside ``window`` (originally at gap ``b``).

    Walks up the cells containing the boundary pair and returns the nearer
    edge of the largest one with at most n_max points of every type.
    """
    keys = ZKeys(window)
    W = window.shape[0]
    sent = sentinel_level(window.shape[1], keys.fmt.emax)
    lvl = np.empty(W + 1, dtype=np.int64)
    lvl[0] = lvl[W] = sent
    for g in range(1, W):
        lvl[g] = keys.level(g - 1, g)
    cum = np.zeros((W + 1, n_types), dtype=np.int64)
    np.cumsum(np.eye(n_types, dtype=np.int64)[types], axis=0, out=cum[1:])
    best = None
    cur = lvl[b]
    while True:
        left = b - 1
        while left > 0 and lvl[left] <= cur:
            left -= 1
        right = b + 1
        while right < W and lvl[right] <= cur:
            right += 1
        if left <= 0 or right >= W:
            break
        if (cum[right] - cum[left]).max() > n_max:
            break
        best = (left, right)
        cur = min(lvl[left], lvl[right])
    if best is None:
        return b
    left, right = best
    return left if b - left <= right - b else right


def adjust_domains(cluster: Cluster, n_max: int | None = None) -> list[int]:
    """Move every rank boundary out of small Morton cells.

    Returns the new global boundary offsets.  Afterwards the gap at each
    boundary belongs to a cell with more than ``n_max`` points of some type,
    so it is a split on every plane and local trees never cross ranks.
    Boundaries that cannot move without emptying a rank are listed in
    ``cluster.unadjusted``.
    """
    st = cluster.states
    net = cluster.net
    R = cluster.n_ranks
    n_total = sum(s.n for s in st)
    if n_max is None:
        n_max = coarsest_n_max(n_total, cluster.params)
    w = n_max * cluster.n_types + 1     # any cell this long exceeds n_max for some type
    for r in range(R - 1):
        net.send(r, r + 1, "tail", (st[r].x[-w:], st[r].types[-w:]))
        net.send(r + 1, r, "head", (st[r + 1].x[:w], st[r + 1].types[:w]))
    inbox = net.deliver()
    shifts = np.zeros(R + 1, dtype=np.int64)
    for r in range(1, R):
        tail = next(m.payload for m in inbox[r] if m.kind == "tail")
        own = (st[r].x[:w], st[r].types[:w])
        window = np.ascontiguousarray(np.concatenate([tail[0], own[0]]))
        types = np.concatenate([tail[1], own[1]])
        b = len(tail[0])
        shifts[r] = _boundary_shift(window, types, cluster.n_types, b, n_max) - b
    # shifts[r] < 0: rank r-1 hands its last points to r; > 0: r hands its first points to r-1.
    # A shift that would empty a rank is dropped; that boundary then stays inside a
    # node and the local trees become rank-local forests (walk results stay exact).
    sizes = [s.n for s in st]
    cluster.unadjusted = []
    while True:
        bad = [r for r in range(R)
               if (max(shifts[r], 0) if r > 0 else 0) + (max(-shifts[r + 1], 0) if r + 1 < R else 0) >= sizes[r]]
        if not bad:
            break
        for r in bad:
            for b in (r, r + 1):
                if 0 < b < R and shifts[b] != 0:
                    shifts[b] = 0
                    cluster.unadjusted.append(b)
    for r in range(R):
        give_head = max(shifts[r], 0) if r > 0 else 0
        give_tail = max(-shifts[r + 1], 0) if r + 1 < R else 0
        if give_head:
            net.send(r, r - 1, "shift", ("append", _take(st[r], 0, give_head)))
        if give_tail:
            net.send(r, r + 1, "shift", ("prepend", _take(st[r], st[r].n - give_tail, st[r].n)))
    cuts = [(max(shifts[r], 0) if r > 0 else 0, st[r].n - (max(-shifts[r + 1], 0) if r + 1 < R else 0))
            for r in range(R)]
    inbox = net.deliver()
    for r in range(R):
        kept = _take(st[r], *cuts[r])
        pre = [m.payload[1] for m in inbox[r] if m.payload[0] == "prepend"]
        app = [m.payload[1] for m in inbox[r] if m.payload[0] == "append"]
        _set(st[r], pre + [kept] + app)
    _exchange_boundary_levels(cluster)
    cluster.boundaries = cluster.offsets()[1:-1].tolist()
    return cluster.boundaries


def _take(s: RankState, a: int, b: int) -> dict:
    return {"x": s.x[a:b], "types": s.types[a:b], "gid": s.gid[a:b],
            "masses": None if s.masses is None else s.masses[a:b],
            "velocities": None if s.velocities is None else s.velocities[a:b]}


def _set(s: RankState, parts: list[dict]) -> None:
    s.x = np.ascontiguousarray(np.concatenate([p["x"] for p in parts]))
    s.types = np.concatenate([p["types"] for p in parts])
    s.gid = np.concatenate([p["gid"] for p in parts])
    if s.masses is not None:
        s.masses = np.concatenate([p["masses"] for p in parts])
    if s.velocities is not None:
        s.velocities = np.concatenate([p["velocities"] for p in parts])


def _exchange_boundary_levels(cluster: Cluster) -> None:
    st = cluster.states
    net = cluster.net
    for r in range(cluster.n_ranks - 1):
        net.send(r, r + 1, "last", st[r].x[-1:])
        net.send(r + 1, r, "first", st[r + 1].x[:1])
    inbox = net.deliver()
    for r, s in enumerate(st):
        s.left_level = s.right_level = None
        for msg in inbox[r]:
            if msg.kind == "last":
                s.left_level = ZKeys(np.ascontiguousarray(np.concatenate([msg.payload, s.x[:1]]))).level(0, 1)
            elif msg.kind == "first":
                s.right_level = ZKeys(np.ascontiguousarray(np.concatenate([s.x[-1:], msg.payload]))).level(0, 1)


def build_local_trees(cluster: Cluster) -> None:
    """Per-rank trees with globally agreed regularization and plane count."""
    st = cluster.states
    net = cluster.net
    n_total = sum(s.n for s in st)
    builders = [TreeBuilder(s.x, s.types, cluster.n_types, cluster.params, n_total,
                            s.left_level, s.right_level) for s in st]
    p = 0
    while True:
        hists = net.allgather("histogram", [b.candidate_histogram(p) for b in builders])
        lvl_max = lvl_max_from_histogram(merge_histograms(hists), cluster.params.f_max)
        planes = [b.finalize_plane(p, lvl_max) for b in builders]
        total = sum(net.allgather("n_nodes", [pl.n_nodes for pl in planes]))
        if builders[0].should_stop(p, total):
            break
        p += 1
    for s, b in zip(st, builders):
        s.tree = assemble(b, np.arange(s.n), np.zeros(cluster.n_types + 1, dtype=np.int64))


def prepare(typed_points, n_ranks: int, box=None, params: TreeParams | None = None,
            n_samp: int = 1000, seed: int = 0, masses=None, velocities=None) -> Cluster:
    cl = partitioned_zsort(typed_points, n_ranks, n_samp, seed, box, masses, velocities, params)
    if n_ranks > 1:
        adjust_domains(cl)
    build_local_trees(cl)
    return cl


# ----------------------------------------------------------------------------
# node tables with origins


@dataclass
class Table:
    """Node rows of one plane: local nodes first, remote rows appended."""

    center: np.ndarray
    half: np.ndarray
    count: np.ndarray      # (n, n_types)
    start: np.ndarray      # first point on the origin rank
    size: np.ndarray       # points in the node
    origin: np.ndarray     # (n, 2) rank, node index on that rank's plane

    @property
    def n(self) -> int:
        return self.center.shape[0]

    def take(self, idx) -> "Table":
        return Table(self.center[idx], self.half[idx], self.count[idx], self.start[idx],
                     self.size[idx], self.origin[idx])

    @staticmethod
    def concat(parts: list["Table"]) -> "Table":
        return Table(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("center", "half", "count", "start", "size", "origin")))


def _plane_rows(rank: int, plane, idx=None) -> Table:
    sel = np.arange(plane.n_nodes) if idx is None else np.asarray(idx, np.int64)
    start = plane.start[:-1][sel]
    size = plane.start[1:][sel] - start
    origin = np.stack([np.full(len(sel), rank, np.int64), sel], axis=1)
    return Table(plane.center[sel], plane.half[sel], plane.count[sel], start, size, origin)


def _top_step(cluster: Cluster, ngr: int):
    """Child table of the coarsest plane plus super-node parents, per rank."""
    st = cluster.states
    tops = cluster.net.allgather("top_nodes", [_plane_rows(s.rank, s.tree.coarse_to_fine[0]) for s in st])
    out = []
    for s in st:
        order = [s.rank] + [r for r in range(cluster.n_ranks) if r != s.rank]
        table = Table.concat([tops[r] for r in order])
        beg, end, base = [], [], 0
        for r in order:
            spl = super_node_splits(tops[r].n, ngr)
            beg.append(spl[:-1] + base)
            end.append(spl[1:] + base)
            base += tops[r].n
        r_chl = super_node_splits(tops[s.rank].n, ngr)
        out.append((table, np.concatenate(beg), np.concatenate(end), r_chl))
    return out


def _fetch_children(cluster: Cluster, step: int, parents: list[Table]):
    """Child tables of the given parent rows (coarse-to-fine step ``step`` -> ``step + 1``).

    Local children come first (the whole local plane); remote children are
    requested once per unique origin and appended contiguously.
    """
    st = cluster.states
    net = cluster.net
    for s, par in zip(st, parents):
        want = defaultdict(list)
        for r, i in par.origin.tolist():
            if r != s.rank:
                want[r].append(i)
        for r, idx in want.items():
            for i in idx:
                net.note_request(("children", step, s.rank, r, i))
            net.send(s.rank, r, "child_request", (step, np.array(idx, np.int64)))
    inbox = net.deliver()
    for s in st:
        ctf = s.tree.coarse_to_fine
        for msg in inbox[s.rank]:
            stp, idx = msg.payload
            if np.any(idx < 0) or np.any(idx >= ctf[stp].n_nodes):
                raise ProtocolError(f"rank {s.rank} has no node {idx} on step {stp}")
            spl = ctf[stp].spl
            kids = np.concatenate([np.arange(spl[i], spl[i + 1]) for i in idx])
            lens = spl[idx + 1] - spl[idx]
            net.send(s.rank, msg.src, "child_data", (idx, lens, _plane_rows(s.rank, ctf[stp + 1], kids)))
    inbox = net.deliver()
    out = []
    for s, par in zip(st, parents):
        ctf = s.tree.coarse_to_fine
        local = _plane_rows(s.rank, ctf[step + 1])
        got = {}
        parts = [local]
        base = local.n
        for msg in inbox[s.rank]:
            idx, lens, rows = msg.payload
            offs = np.concatenate([[0], np.cumsum(lens)])
            for t, i in enumerate(idx.tolist()):
                got[(msg.src, i)] = (base + offs[t], base + offs[t + 1])
            parts.append(rows)
            base += rows.n
        table = Table.concat(parts)
        spl = ctf[step].spl
        beg = np.empty(par.n, np.int64)
        end = np.empty(par.n, np.int64)
        for e, (r, i) in enumerate(par.origin.tolist()):
            if r == s.rank:
                beg[e], end[e] = spl[i], spl[i + 1]
            else:
                beg[e], end[e] = got[(r, i)]
        out.append((table, beg, end))
    return out


def _fetch_points(cluster: Cluster, leaves: list[Table], types: int | None):
    """Point rows (positions, origin index) of leaf rows; local points first.

    With ``types`` set only points of that type are shipped and origin
    indices count within the type.
    """
    st = cluster.states
    net = cluster.net
    for s, lv in zip(st, leaves):
        want = defaultdict(list)
        for r, i in lv.origin.tolist():
            if r != s.rank:
                want[r].append(i)
        for r, idx in want.items():
            for i in idx:
                net.note_request(("points", s.rank, r, i))
            net.send(s.rank, r, "point_request", np.array(idx, np.int64))
    inbox = net.deliver()
    for s in st:
        spl, x, ids = _point_view(s, types)
        for msg in inbox[s.rank]:
            idx = msg.payload
            if np.any(idx < 0) or np.any(idx >= len(spl) - 1):
                raise ProtocolError(f"rank {s.rank} has no leaf {idx}")
            sel = np.concatenate([np.arange(spl[i], spl[i + 1]) for i in idx])
            lens = spl[idx + 1] - spl[idx]
            net.send(s.rank, msg.src, "point_data", (idx, lens, x[sel], ids[sel]))
    inbox = net.deliver()
    out = []
    for s, lv in zip(st, leaves):
        spl, x, ids = _point_view(s, types)
        xs = [x]
        origin = [np.stack([np.full(len(ids), s.rank), ids], axis=1)]
        got = {}
        base = len(x)
        for msg in inbox[s.rank]:
            idx, lens, px, pid = msg.payload
            offs = np.concatenate([[0], np.cumsum(lens)])
            for t, i in enumerate(idx.tolist()):
                got[(msg.src, i)] = (base + offs[t], base + offs[t + 1])
            xs.append(px)
            origin.append(np.stack([np.full(len(pid), msg.src), pid], axis=1))
            base += len(px)
        beg = np.empty(lv.n, np.int64)
        end = np.empty(lv.n, np.int64)
        for e, (r, i) in enumerate(lv.origin.tolist()):
            if r == s.rank:
                beg[e], end[e] = spl[i], spl[i + 1]
            else:
                beg[e], end[e] = got[(r, i)]
        out.append((np.ascontiguousarray(np.concatenate(xs), dtype=np.float64),
                    np.concatenate(origin).astype(np.int64), beg, end))
    return out


def _point_view(s: RankState, types: int | None):
    h = s.tree
    if types is None:
        return h.planes[0].start, h.x, np.arange(s.n)
    return h.leaf_splits[types], h.sorted_points[types], np.arange(len(h.sorted_points[types]))


def _compact(il: InteractionList, keep_first: int = 0):
    """Drop unreferenced source rows; the first ``keep_first`` rows always stay."""
    used = np.unique(il.isrc)
    keep = np.union1d(np.arange(keep_first), used).astype(np.int64)
    remap = np.full(max(int(keep.max(initial=-1)) + 1, 1), -1, np.int64)
    remap[keep] = np.arange(len(keep))
    return keep, InteractionList(remap[il.isrc], il.ispl, il.r_low)


# ----------------------------------------------------------------------------
# distributed kNN


def distributed_knn(cluster: Cluster, k: int, options: KnnOptions | None = None) -> list[KnnResult]:
    """Per-rank exact kNN of the local queries; rows and indices in global z order.

    Queries are type 1 when the cluster holds two types, else the sources.
    """
    opts = options or KnnOptions()
    st = cluster.states
    L = cluster.box
    s_type = 0
    q_type = 1 if cluster.n_types > 1 else 0
    if k < 1 or k > cluster.type_counts[s_type]:
        raise ValidationError(f"k = {k} outside [1, {cluster.type_counts[s_type]}]")
    cluster.net.new_operation()
    tops = _top_step(cluster, opts.ngr)
    n_src_super = [len(t[1]) for t in tops]
    ils = []
    for (table, beg, end, r_chl), ns in zip(tops, n_src_super):
        nr = len(r_chl) - 1
        ils.append(InteractionList(np.tile(np.arange(ns), nr), np.arange(nr + 1) * ns, np.zeros(nr * ns)))
    tables = [t[0] for t in tops]
    cbeg = [t[1] for t in tops]
    cend = [t[2] for t in tops]
    r_chls = [t[3] for t in tops]
    n_steps = len(st[0].tree.planes)
    for step in range(n_steps):
        parents = []
        for r, s in enumerate(st):
            pl = s.tree.coarse_to_fine[step]
            tab = tables[r]
            recv = NodeTable(pl.center, pl.half, np.ascontiguousarray(pl.count[:, q_type]),
                             r_chls[r][:-1].copy(), r_chls[r][1:].copy())
            src = NodeTable(tab.center, tab.half, np.ascontiguousarray(tab.count[:, s_type]),
                            cbeg[r], cend[r])
            rmax = find_rmax(ils[r], recv, src, k, L, opts.n_r, opts.early_exit, opts.sort_segments)
            il = node_to_node(ils[r], recv, src, rmax, L, opts.early_exit, opts.sort_segments,
                              opts.sort_segments)
            keep, ils[r] = _compact(il)
            parents.append(tab.take(keep))
            r_chls[r] = pl.spl
        if step + 1 < n_steps:
            fetched = _fetch_children(cluster, step, parents)
            tables = [f[0] for f in fetched]
            cbeg = [f[1] for f in fetched]
            cend = [f[2] for f in fetched]
        else:
            tables = parents
    pts = _fetch_points(cluster, tables, s_type)
    s_off = cluster.type_offsets(s_type)
    out = []
    for r, s in enumerate(st):
        sx, origin, beg, end = pts[r]
        skey = s_off[origin[:, 0]] + origin[:, 1]
        q_spl = s.tree.leaf_splits[q_type]
        qx = np.ascontiguousarray(s.tree.sorted_points[q_type], dtype=np.float64)
        idx, dist = chunked_leaf_pass(ils[r], q_spl[:-1], q_spl[1:], beg, end, qx, sx, skey, k, L,
                                      opts.k_max, opts.early_exit, opts.sort_segments,
                                      tables[r].center, tables[r].half)
        out.append(KnnResult(idx, dist, "z"))
    return out


def type_permutation(cluster: Cluster, t: int = 0) -> np.ndarray:
    """Global z position -> input index within point type ``t``."""
    off = np.concatenate([[0], np.cumsum(cluster.type_counts)])
    return np.concatenate([s.gid[s.types == t] for s in cluster.states]) - off[t]


def gather_knn(results: list[KnnResult]) -> KnnResult:
    return KnnResult(np.concatenate([r.indices for r in results]),
                     np.concatenate([r.distances for r in results]), "z")


# ----------------------------------------------------------------------------
# distributed FoF


def distributed_fof(cluster: Cluster, r_link: float, options: FofOptions | None = None,
                    max_rounds: int | None = None) -> list[np.ndarray]:
    """Per-rank group labels as global z indices of each group's root point.

    Remote nodes and points enter the local walk as provisional roots; each
    one that joins a local group yields a PendingEdge, and the edges are
    resolved across ranks afterwards.
    """
    opts = options or FofOptions()
    if not r_link > 0:
        raise ValidationError("r_link must be positive")
    st = cluster.states
    L = cluster.box
    cluster.net.new_operation()
    tops = _top_step(cluster, opts.ngr)
    state = []
    for (table, beg, end, r_chl), s in zip(tops, st):
        nr = len(r_chl) - 1
        ns = len(beg)
        il = InteractionList(np.tile(np.arange(ns), nr), np.arange(nr + 1) * ns, np.zeros(nr * ns))
        n_loc = s.tree.coarse_to_fine[0].n_nodes
        state.append({"il": il, "table": table, "beg": beg, "end": end, "r_chl": r_chl,
                      "ig": np.arange(table.n), "flag": np.zeros(table.n, bool),
                      "inherited": np.zeros(table.n, bool), "n_loc": n_loc})
    for s in st:
        s.pending = []
    n_steps = len(st[0].tree.planes)
    for step in range(n_steps):
        parents = []
        for r, s in enumerate(st):
            w = state[r]
            tab = w["table"]
            fs = FofStep(w["r_chl"], w["beg"], w["end"], tab.center, tab.half)
            il = node_step(w["il"], fs, w["ig"], w["flag"], r_link, L, opts)
            _record_node_edges(s, tab, w["ig"], w["inherited"], w["n_loc"])
            keep, w["il"] = _compact(il, w["n_loc"])
            remap = np.full(tab.n, -1, np.int64)
            remap[keep] = np.arange(len(keep))
            w["pig"] = remap[w["ig"][keep]]
            w["pflag"] = w["flag"][keep]
            parents.append(tab.take(keep))
            w["r_chl"] = s.tree.coarse_to_fine[step].spl
        if step + 1 < n_steps:
            fetched = _fetch_children(cluster, step, parents)
            for r, s in enumerate(st):
                w = state[r]
                table, beg, end = fetched[r]
                ig, flag = _parent_to_node(w["pig"], _group_flags(w["pig"], w["pflag"]), beg, end, table.n)
                w.update(table=table, beg=beg, end=end, ig=ig, flag=flag, inherited=flag.copy(),
                         n_loc=s.tree.coarse_to_fine[step + 1].n_nodes)
        else:
            for r in range(len(st)):
                state[r]["leaves"] = parents[r]
    pts = _fetch_points(cluster, [state[r]["leaves"] for r in range(len(st))], None)
    local_labels = []
    for r, s in enumerate(st):
        w = state[r]
        x, origin, beg, end = pts[r]
        ig, inh = _parent_to_node(w["pig"], _group_flags(w["pig"], w["pflag"]), beg, end, len(x))
        point_step(w["il"], beg, end, x, ig, r_link, L, opts)
        for e in np.flatnonzero((np.arange(len(x)) >= s.n) & (ig != np.arange(len(x))) & ~inh).tolist():
            s.pending.append(PendingEdge(int(origin[e, 0]), int(origin[e, 1]), s.rank, int(ig[e])))
        local_labels.append(ig[:s.n].copy())
    roots = _resolve_edges(cluster, local_labels, max_rounds)
    offs = cluster.offsets()
    out = []
    for r, s in enumerate(st):
        g = roots[r]
        s.labels = offs[g[:, 0]] + g[:, 1]
        out.append(s.labels)
    return out


def _record_node_edges(s: RankState, tab: Table, ig: np.ndarray, inherited: np.ndarray, n_loc: int) -> None:
    for e in np.flatnonzero((np.arange(tab.n) >= n_loc) & (ig != np.arange(tab.n)) & ~inherited).tolist():
        root = int(ig[e])
        s.pending.append(PendingEdge(int(tab.origin[e, 0]), int(tab.start[e]), s.rank,
                                     int(tab.start[root]), int(tab.size[e])))


def _resolve_edges(cluster: Cluster, local_labels: list[np.ndarray], max_rounds: int | None):
    """Merge the pending edges into per-point global roots, shape (n, 2)."""
    st = cluster.states
    net = cluster.net
    R = cluster.n_ranks
    # remote nodes known to be internally connected: join their points at home
    for s in st:
        for e in s.pending:
            if e.span > 1:
                net.send(s.rank, e.rank_a, "span", (e.idx_a, e.span))
    inbox = net.deliver()
    for s in st:
        lab = local_labels[s.rank]
        pairs = [(a, a + t) for msg in inbox[s.rank] for a, span in [msg.payload] for t in range(1, span)]
        if pairs:
            _link_pairs(lab, np.array(pairs, np.int64))
            _contract(lab)

    # global pointers of local roots, initially themselves
    glab = [np.stack([np.full(s.n, s.rank), np.arange(s.n)], axis=1) for s in st]
    edges = [(e.rank_a, e.idx_a, e.rank_b, e.idx_b) for s in st for e in s.pending]
    total = len(edges)
    limit = max_rounds if max_rounds is not None else 2 * total + 2 * R + 4
    for s in st:
        for e in s.pending:
            _send_edge(net, s.rank, (e.rank_a, e.idx_a), (e.rank_b, e.idx_b))
    rounds = 0
    while net.queue:
        rounds += 1
        if rounds > limit:
            raise ProtocolError(f"edge resolution did not converge within {limit} rounds")
        inbox = net.deliver()
        for s in st:
            lab = local_labels[s.rank]
            g = glab[s.rank]
            proposals: dict[int, list] = {}
            for msg in inbox[s.rank]:
                (xr, xi), y = msg.payload
                lr = int(lab[xi])
                gx = (int(g[lr, 0]), int(g[lr, 1]))
                if gx == y:
                    continue
                if gx == (s.rank, lr) and y < gx:
                    proposals.setdefault(lr, []).append(y)
                else:
                    _send_edge(net, s.rank, gx, y)
            for lr, ys in proposals.items():
                ys.sort()
                g[lr] = ys[0]
                for y in ys[1:]:
                    _send_edge(net, s.rank, (s.rank, lr), y)

    # global contraction: follow pointers until nothing changes
    while True:
        for s in st:
            lab = local_labels[s.rank]
            g = glab[s.rank]
            roots = np.unique(lab)
            far = roots[(g[roots, 0] != s.rank) | (g[roots, 1] != roots)]
            want = defaultdict(list)
            for lr in far.tolist():
                want[int(g[lr, 0])].append((lr, int(g[lr, 1])))
            for r, items in want.items():
                net.send(s.rank, r, "label_request", items)
        inbox = net.deliver()
        for s in st:
            lab = local_labels[s.rank]
            g = glab[s.rank]
            for msg in inbox[s.rank]:
                net.send(s.rank, msg.src, "label_reply",
                         [(lr, tuple(int(v) for v in g[lab[i]])) for lr, i in msg.payload])
        inbox = net.deliver()
        changed = []
        for s in st:
            g = glab[s.rank]
            ch = False
            for msg in inbox[s.rank]:
                for lr, tgt in msg.payload:
                    if tuple(g[lr]) != tgt:
                        g[lr] = tgt
                        ch = True
            changed.append(ch)
        if not any(net.allgather("converged", changed)):
            break
    return [glab[s.rank][local_labels[s.rank]] for s in st]


def _send_edge(net: Mailbox, src: int, a: tuple, b: tuple) -> None:
    """Send an edge to the rank holding its larger endpoint."""
    a = (int(a[0]), int(a[1]))
    b = (int(b[0]), int(b[1]))
    if a == b:
        return
    hi, lo = (a, b) if a > b else (b, a)
    net.send(src, hi[0], "edge", (hi, lo))


def gather_labels(labels: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(labels)


def global_labels(cluster: Cluster, labels: list[np.ndarray]) -> list[list[GlobalLabel]]:
    """Per-rank roots as (rank, local index) records."""
    offs = cluster.offsets()
    out = []
    for lab in labels:
        r = np.searchsorted(offs, lab, side="right") - 1
        out.append([GlobalLabel(int(a), int(b)) for a, b in zip(r, lab - offs[r])])
    return out


# ----------------------------------------------------------------------------
# distributed catalogue


def distributed_catalogue(cluster: Cluster, labels: list[np.ndarray], min_count: int = MIN_COUNT):
    """Group statistics computed at the rank owning each group's root point.

    Round one sends per-group member counts to the root owner, which picks
    the groups reaching ``min_count``; round two ships only their members.
    The owner reduces them in global z order with the single-rank code, so
    entries are bit-identical for every rank count.
    """
    st = cluster.states
    net = cluster.net
    offs = cluster.offsets()
    for s, lab in zip(st, labels):
        groups, counts = np.unique(lab, return_counts=True)
        own = np.searchsorted(offs, groups, side="right") - 1
        for o in np.unique(own).tolist():
            sel = own == o
            net.send(s.rank, o, "group_count", (groups[sel], counts[sel]))
    inbox = net.deliver()
    for s in st:
        total = defaultdict(int)
        for msg in inbox[s.rank]:
            for g, c in zip(*msg.payload):
                total[int(g)] += int(c)
        for msg in inbox[s.rank]:
            keep = [int(g) for g in msg.payload[0] if total[int(g)] >= min_count]
            net.send(s.rank, msg.src, "group_keep", np.array(keep, np.int64))
    inbox = net.deliver()
    for s, lab in zip(st, labels):
        keep = np.concatenate([msg.payload for msg in inbox[s.rank]] + [np.zeros(0, np.int64)])
        sel = np.flatnonzero(np.isin(lab, keep))
        own = np.searchsorted(offs, lab[sel], side="right") - 1
        for o in np.unique(own).tolist():
            part = sel[own == o]
            net.send(s.rank, o, "members", (offs[s.rank] + part, lab[part], s.x[part],
                                            None if s.masses is None else s.masses[part],
                                            None if s.velocities is None else s.velocities[part]))
    inbox = net.deliver()
    box = cluster.box if np.any(cluster.box > 0) else None
    out = []
    for s in st:
        parts = [msg.payload for msg in inbox[s.rank]]
        if not parts:
            out.append([])
            continue
        order = np.argsort(np.concatenate([p[0] for p in parts]), kind="stable")
        cols = [None if parts[0][i] is None else np.concatenate([p[i] for p in parts])[order]
                for i in range(1, 5)]
        out.append(reduce_catalogue(cols[1], cols[0], cols[2], cols[3], 0, box))
    return out
