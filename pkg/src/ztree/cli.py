"""Command-line driver: ``ztree gen | knn | fof | bench``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 capacity or
protocol error.  ``ZTREE_THREADS`` caps worker threads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CapacityError, ProtocolError, ValidationError
from . import partsim
from .fof import FofOptions, FofResult, catalogue, fof, linking_length
from .knn import KnnOptions, knn_query
from .oracle import brute_fof, brute_knn
from .pointfile import read_points, write_points
from .points import PointSet, wrap_into_box
from .zorder import z_sort

ORACLE_LIMIT = 20_000


class UsageError(Exception):
    pass


@dataclass
class BenchRecord:
    op: str
    n: int
    d: int
    param: float           # k for knn, alpha for fof
    n_ranks: int
    seed: int
    sort_ms: float
    tree_ms: float
    walk_ms: float
    leaf_ms: float
    reduce_ms: float       # reorder for knn
    total_ms: float
    result_hash: str
    n_groups: int = -1


def thread_cap() -> int:
    raw = os.environ.get("ZTREE_THREADS")
    if raw is None:
        return 4
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ZTREE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ZTREE_THREADS must be >= 1")
    return n


# ----------------------------------------------------------------------------
# gen


def generate(dist: str, n: int, d: int, seed: int, box: float | None = None) -> PointSet:
    if n < 1 or d < 1:
        raise UsageError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 if box is None else box
    if dist == "grid":
        m = int(round(n ** (1.0 / d)))
        if m ** d != n:
            raise UsageError(f"grid needs n to be a perfect {d}-th power, got {n}")
        axes = np.meshgrid(*([np.arange(m) / m] * d), indexing="ij")
        x = np.stack([a.ravel() for a in axes], axis=1) * scale
    elif dist == "uniform":
        x = rng.random((n, d)) * scale
    elif dist == "gaussian":
        x = rng.standard_normal((n, d))
        if box is not None:
            x = np.mod(0.5 * box + 0.1 * box * x, box)
    else:
        raise UsageError(f"unknown distribution {dist!r}")
    return PointSet(x, box=box)


def cmd_gen(a) -> int:
    if a.box is not None and not a.box > 0:
        raise UsageError("--box must be positive")
    ps = generate(a.dist, a.n, a.d, a.seed, a.box)
    rng = np.random.default_rng([a.seed, 1])
    if a.mass:
        ps.masses = rng.uniform(0.5, 1.5, ps.n)
    if a.velocity:
        ps.velocities = rng.standard_normal((ps.n, ps.dim))
    write_points(a.out, ps)
    print(f"gen: {a.dist} n={ps.n} d={ps.dim} -> {a.out}")
    return 0


# ----------------------------------------------------------------------------
# knn


def _box_of(ps: PointSet, a):
    if a.box is not None:
        return np.full(ps.dim, a.box)
    return ps.box if ps.periodic else None


def run_knn(src: PointSet, qry: PointSet | None, k: int, box, ranks: int, order: str,
            oracle: bool = False, seed: int = 0):
    """(indices, distances, query_ids) in the requested order, plus timings."""
    t0 = time.perf_counter()
    if oracle:
        n_q = src.n if qry is None else qry.n
        if max(src.n, n_q) > ORACLE_LIMIT:
            raise UsageError(f"--oracle is limited to {ORACLE_LIMIT} points")
        if k > src.n:
            raise ValidationError(f"k = {k} exceeds the {src.n} sources")
        sx = _wrapped(src.positions, box)
        qx = sx if qry is None else _wrapped(qry.positions, box)
        ref = brute_knn(sx, None if qry is None else qx, k, box)
        idx, dist = ref.indices, ref.distances
        if order == "z":
            if qry is None:
                s_perm = q_perm = z_sort(sx)
            else:
                joint = z_sort(np.concatenate([sx, qx]))
                s_perm = joint[joint < src.n]
                q_perm = joint[joint >= src.n] - src.n
            rank_of = np.empty_like(s_perm)
            rank_of[s_perm] = np.arange(len(s_perm))
            idx, dist = rank_of[idx[q_perm]], dist[q_perm]
        return idx, dist, {"total": (time.perf_counter() - t0) * 1e3}
    if ranks == 1:
        res = knn_query(src, qry, k, box, KnnOptions(order=order))
        return res.indices, res.distances, res.timings
    typed = [src.positions] if qry is None else [src.positions, qry.positions]
    cl = partsim.prepare(typed, ranks, box=box, seed=seed)
    t1 = time.perf_counter()
    res = partsim.gather_knn(partsim.distributed_knn(cl, k))
    t2 = time.perf_counter()
    idx, dist = res.indices, res.distances
    if order == "input":
        s_perm = partsim.type_permutation(cl, 0)
        q_perm = partsim.type_permutation(cl, 0 if qry is None else 1)
        out_i = np.empty_like(idx)
        out_d = np.empty_like(dist)
        out_i[q_perm] = s_perm[idx]
        out_d[q_perm] = dist
        idx, dist = out_i, out_d
    t3 = time.perf_counter()
    return idx, dist, {"sort": 0.0, "tree": (t1 - t0) * 1e3, "walk": (t2 - t1) * 1e3,
                       "leaf": 0.0, "reorder": (t3 - t2) * 1e3, "total": (t3 - t0) * 1e3}


def _wrapped(x, box):
    if box is None:
        return np.asarray(x, dtype=np.float64)
    return wrap_into_box(x, np.asarray(box, dtype=np.float64))


def write_knn_csv(path, idx, dist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_index", "rank", "neighbour_index", "distance"])
        for q in range(idx.shape[0]):
            for r in range(idx.shape[1]):
                w.writerow([q, r, int(idx[q, r]), repr(float(dist[q, r]))])


def cmd_knn(a) -> int:
    src = read_points(a.input)
    qry = read_points(a.queries) if a.queries else None
    if qry is not None and qry.dim != src.dim:
        raise ValidationError("queries and sources must share the dimension")
    box = _box_of(src, a)
    idx, dist, t = run_knn(src, qry, a.k, box, a.ranks, a.order, a.oracle, a.seed)
    write_knn_csv(a.out, idx, dist)
    print(f"knn: n={src.n} queries={idx.shape[0]} k={a.k} ranks={a.ranks} order={a.order} "
          f"total={t.get('total', 0.0):.1f} ms -> {a.out}")
    return 0


# ----------------------------------------------------------------------------
# fof


def resolve_r_link(ps: PointSet, alpha, rlink, box) -> float:
    if alpha is not None and rlink is not None:
        raise UsageError("give either --alpha or --rlink, not both")
    if rlink is not None:
        if not rlink > 0:
            raise UsageError("--rlink must be positive")
        return float(rlink)
    alpha = 0.2 if alpha is None else alpha
    if box is None or not np.all(np.asarray(box) > 0):
        raise UsageError("--alpha needs a periodic box to define the volume; use --rlink")
    return linking_length(alpha, float(np.prod(box)), ps.n)


def run_fof(ps: PointSet, r_link: float, box, ranks: int, min_count: int, oracle: bool = False,
            seed: int = 0, threads: int = 4):
    """(labels in input order, catalogue rows keyed by input root index, timings)."""
    t0 = time.perf_counter()
    pts = PointSet(ps.positions, ps.masses, ps.velocities, box)
    if oracle:
        if ps.n > ORACLE_LIMIT:
            raise UsageError(f"--oracle is limited to {ORACLE_LIMIT} points")
        x = _wrapped(ps.positions, box)
        lab_in = brute_fof(x, r_link, box)
        perm = z_sort(x)
        # z labels: minimum z position of each component
        comp_min = np.full(ps.n, ps.n)
        np.minimum.at(comp_min, lab_in[perm], np.arange(ps.n))
        igroup = comp_min[lab_in[perm]]
        res = FofResult(igroup, perm, r_link)
        cat = catalogue(pts, res, min_count)
        return res.labels_input(), [(int(perm[e.group_id]), e) for e in cat], {}
    if ranks == 1:
        res = fof(pts, r_link, box, FofOptions(n_threads=threads))
        t1 = time.perf_counter()
        cat = catalogue(pts, res, min_count)
        t = dict(res.timings)
        t["reduce"] = (time.perf_counter() - t1) * 1e3
        t["total"] = (time.perf_counter() - t0) * 1e3
        return res.labels_input(), [(int(res.perm[e.group_id]), e) for e in cat], t
    cl = partsim.prepare([ps.positions], ranks, box=box, seed=seed, masses=ps.masses,
                         velocities=ps.velocities)
    t1 = time.perf_counter()
    labels = partsim.distributed_fof(cl, r_link, FofOptions(n_threads=threads))
    t2 = time.perf_counter()
    cat = [e for es in partsim.distributed_catalogue(cl, labels, min_count) for e in es]
    perm = partsim.type_permutation(cl, 0)
    z = np.concatenate(labels)
    lab_in = np.empty_like(z)
    lab_in[perm] = perm[z]
    t3 = time.perf_counter()
    return lab_in, [(int(perm[e.group_id]), e) for e in cat], {
        "sort": 0.0, "tree": (t1 - t0) * 1e3, "walk": (t2 - t1) * 1e3, "leaf": 0.0,
        "reduce": (t3 - t2) * 1e3, "total": (t3 - t0) * 1e3}


def write_labels_csv(path, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "group"])
        w.writerows(zip(range(len(labels)), labels.tolist()))


def write_catalogue_csv(path, rows, d: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "count", "mass"] + [f"com_{i}" for i in range(d)]
                   + [f"vel_{i}" for i in range(d)] + ["inertia_radius"])
        for gid, e in rows:
            vel = [""] * d if e.com_velocity is None else [repr(float(v)) for v in e.com_velocity]
            w.writerow([gid, e.count, repr(e.mass)] + [repr(float(c)) for c in e.com] + vel
                       + [repr(e.inertia_radius)])


def cmd_fof(a) -> int:
    ps = read_points(a.input)
    box = _box_of(ps, a)
    r_link = resolve_r_link(ps, a.alpha, a.rlink, box)
    print(f"fof: n={ps.n} d={ps.dim} R_link={r_link!r} ranks={a.ranks} min_count={a.min_count}")
    labels, rows, t = run_fof(ps, r_link, box, a.ranks, a.min_count, a.oracle, a.seed, thread_cap())
    write_labels_csv(a.out_labels, labels)
    if a.out_catalogue:
        write_catalogue_csv(a.out_catalogue, rows, ps.dim)
    n_groups = len(np.unique(labels))
    print(f"fof: groups={n_groups} catalogued={len(rows)} total={t.get('total', 0.0):.1f} ms")
    return 0


# ----------------------------------------------------------------------------
# bench


def _hash(*arrays) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def bench(op: str, sizes, d: int, k: int, alphas, ranks: int, seed: int, dist: str = "uniform",
          threads: int = 4) -> list[BenchRecord]:
    if list(sizes) != sorted(sizes):
        raise UsageError("--sizes must be ascending")
    out = []
    for n in sizes:
        box = 1.0 if op == "fof" else None
        ps = generate(dist, n, d, seed, box)
        if op == "knn":
            idx, dd, t = run_knn(ps, None, k, None, ranks, "z", seed=seed)
            out.append(_record(op, n, d, k, ranks, seed, t, _hash(idx, dd)))
        else:
            for alpha in alphas:
                P = np.full(d, 1.0)
                r_link = linking_length(alpha, 1.0, n)
                labels, _, t = run_fof(ps, r_link, P, ranks, 10 ** 9, seed=seed, threads=threads)
                rec = _record(op, n, d, alpha, ranks, seed, t, _hash(labels))
                rec.n_groups = len(np.unique(labels))
                out.append(rec)
    return out


def _record(op, n, d, param, ranks, seed, t, digest) -> BenchRecord:
    return BenchRecord(op, n, d, float(param), ranks, seed, t.get("sort", 0.0), t.get("tree", 0.0),
                       t.get("walk", 0.0), t.get("leaf", 0.0),
                       t.get("reorder", t.get("reduce", 0.0)), t.get("total", 0.0), digest)


def cmd_bench(a) -> int:
    recs = bench(a.op, a.sizes, a.d, a.k, a.alpha, a.ranks, a.seed, a.dist, thread_cap())
    fields = list(asdict(recs[0]).keys()) if recs else []
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in recs:
            w.writerow(asdict(r))
    for r in recs:
        print(f"bench: {r.op} n={r.n} param={r.param:g} total={r.total_ms:.1f} ms")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ztree", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="write a synthetic point file")
    g.add_argument("--dist", choices=["grid", "uniform", "gaussian"], default="uniform")
    g.add_argument("-n", type=int, required=True)
    g.add_argument("-d", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--box", type=float, help="periodic box length (all dimensions)")
    g.add_argument("--mass", action="store_true", help="add random masses")
    g.add_argument("--velocity", action="store_true", help="add random velocities")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen)

    k = sub.add_parser("knn", help="k nearest neighbours")
    k.add_argument("input")
    k.add_argument("--queries")
    k.add_argument("-k", type=int, default=16)
    k.add_argument("--box", type=float, help="override the file's periodic box")
    k.add_argument("--ranks", type=int, default=1)
    k.add_argument("--order", choices=["z", "input"], default="input")
    k.add_argument("--oracle", action="store_true", help=f"brute force (N <= {ORACLE_LIMIT})")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("-o", "--out", required=True)
    k.set_defaults(func=cmd_knn)

    f = sub.add_parser("fof", help="friends-of-friends groups")
    f.add_argument("input")
    f.add_argument("--alpha", type=float, help="linking length in mean separations (default 0.2)")
    f.add_argument("--rlink", type=float, help="absolute linking length")
    f.add_argument("--box", type=float, help="override the file's periodic box")
    f.add_argument("--ranks", type=int, default=1)
    f.add_argument("--min-count", type=int, default=20)
    f.add_argument("--oracle", action="store_true", help=f"brute force (N <= {ORACLE_LIMIT})")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out-labels", required=True)
    f.add_argument("--out-catalogue")
    f.set_defaults(func=cmd_fof)

    b = sub.add_parser("bench", help="phase timings over a size sweep")
    b.add_argument("--op", choices=["knn", "fof"], default="knn")
    b.add_argument("--sizes", type=int, nargs="+", required=True)
    b.add_argument("-d", type=int, default=3)
    b.add_argument("-k", type=int, default=16)
    b.add_argument("--alpha", type=float, nargs="+", default=[0.2])
    b.add_argument("--ranks", type=int, default=1)
    b.add_argument("--dist", choices=["grid", "uniform", "gaussian"], default="uniform")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if getattr(args, "ranks", 1) < 1:
            raise UsageError("--ranks must be >= 1")
        thread_cap()
        return args.func(args)
    except UsageError as e:
        print(f"ztree: usage error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, OSError) as e:
        print(f"ztree: data error: {e}", file=sys.stderr)
        return 3
    except (CapacityError, ProtocolError) as e:
        print(f"ztree: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
