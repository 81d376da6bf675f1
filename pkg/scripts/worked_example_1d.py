"""Print the 1D worked example of the tree-plane construction.

Eight points on a line: gap levels, cell populations, leaf splits with
N_max = 2 and the next plane with N_max = 4.
"""

import numpy as np

from ztree.treebuild import (TreeParams, build_hierarchy, gap_populations, pair_levels, select_splits,
                             windowed_leaf_splits)

X = np.array([1.6, 3.1, 3.3, 4.6, 5.6, 6.8, 9.4, 9.7])


def main():
    x = X.reshape(-1, 1)
    types = np.zeros(len(X), dtype=np.int64)
    lv = pair_levels(x)
    pop, _, _ = gap_populations(lv, types, 1)
    leaf = windowed_leaf_splits(lv, types, 1, 2)
    coarse = select_splits(leaf, pop, lv, 4)

    def row(name, vals):
        print(f"{name:<18}" + "".join(f"{v:>6}" for v in vals))

    row("x", X.tolist())
    row("lvl (gaps)", lv[1:-1].tolist())
    row("n (gaps)", pop[1:-1].tolist())
    row("spl0 (n > 2)", leaf.tolist())
    row("spl1 (n > 4)", coarse.tolist())

    h = build_hierarchy([x], TreeParams(n_max0=2, c=2, n_target=1))
    for p, pl in enumerate(h.planes):
        boxes = ", ".join(f"[{c - w:g}, {c + w:g})" for c, w in zip(pl.center[:, 0], pl.half[:, 0]))
        print(f"plane {p}: N_max={pl.n_max} spl={pl.spl.tolist()} cells {boxes}")


if __name__ == "__main__":
    main()
