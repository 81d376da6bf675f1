"""Wall time of kNN self-queries and FoF over growing N (uniform, d = 3).

Writes a CSV with the per-phase breakdown; ratios against the smallest N
are printed at the end.
"""

import argparse
import csv
from dataclasses import asdict

from ztree.cli import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100_000, 400_000, 1_000_000])
    ap.add_argument("-k", type=int, default=16)
    ap.add_argument("--alpha", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--out", default="scaling.csv")
    a = ap.parse_args()

    bench("knn", [5000], 3, a.k, [a.alpha], 1, a.seed)     # compile before timing
    bench("fof", [5000], 3, a.k, [a.alpha], 1, a.seed)
    recs = (bench("knn", a.sizes, 3, a.k, [a.alpha], 1, a.seed)
            + bench("fof", a.sizes, 3, a.k, [a.alpha], 1, a.seed))
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(recs[0])))
        w.writeheader()
        w.writerows(asdict(r) for r in recs)
    for op in ("knn", "fof"):
        rs = [r for r in recs if r.op == op]
        base = rs[0].total_ms
        for r in rs:
            print(f"{op} n={r.n:>8} total={r.total_ms:9.1f} ms  ratio={r.total_ms / base:5.2f}"
                  f"  (tree {r.tree_ms:.0f}, walk {r.walk_ms:.0f}, leaf {r.leaf_ms:.0f})")
    print(f"wrote {a.out}")


if __name__ == "__main__":
    main()
