"""Compare simulated multi-rank kNN and FoF against a single rank."""

import argparse

import numpy as np

from ztree.fof import fof, linking_length
from ztree.knn import KnnOptions, knn_query
from ztree.partsim import distributed_fof, distributed_knn, gather_knn, gather_labels, prepare


def clustered(n, d, rng):
    centers = rng.random((8, d))
    return np.mod(centers[rng.integers(0, 8, n)] + 0.02 * rng.standard_normal((n, d)), 1.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", type=int, default=10_000)
    ap.add_argument("-d", type=int, default=3)
    ap.add_argument("-k", type=int, default=16)
    ap.add_argument("--alpha", type=float, default=0.2)
    ap.add_argument("--ranks", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    rng = np.random.default_rng(a.seed)
    r_link = linking_length(a.alpha, 1.0, a.n)
    for name, x in (("uniform", rng.random((a.n, a.d))), ("clustered", clustered(a.n, a.d, rng))):
        ref_k = knn_query(x, None, a.k, 1.0, KnnOptions(order="z"))
        ref_f = fof(x, r_link, 1.0).igroup
        for n_ranks in a.ranks:
            cl = prepare(x, n_ranks, box=1.0, seed=a.seed)
            got = gather_knn(distributed_knn(cl, a.k))
            lab = gather_labels(distributed_fof(cl, r_link))
            dk = np.count_nonzero(got.indices != ref_k.indices) + np.count_nonzero(got.distances != ref_k.distances)
            df = np.count_nonzero(lab != ref_f)
            print(f"{name:<9} ranks={n_ranks} imbalance={cl.imbalance:.3f} unadjusted={cl.unadjusted} "
                  f"knn_diffs={dk} fof_diffs={df} messages={sum(cl.net.counters.values())} rounds={cl.net.rounds}")


if __name__ == "__main__":
    main()
