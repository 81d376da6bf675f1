"""Segmented receiver -> source interaction lists."""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np


@dataclass
class InteractionList:
    """Receiver ``i`` interacts with ``isrc[ispl[i]:ispl[i + 1]]``.

    ``r_low`` holds the lower node-node distance of every interaction;
    ``origin`` is an optional (n_sources, 2) table of (rank, index) records
    used by the rank simulator.
    """

    isrc: np.ndarray
    ispl: np.ndarray
    r_low: np.ndarray
    origin: np.ndarray | None = None

    def __post_init__(self):
        self.isrc = np.ascontiguousarray(self.isrc, dtype=np.int64)
        self.ispl = np.ascontiguousarray(self.ispl, dtype=np.int64)
        self.r_low = np.ascontiguousarray(self.r_low, dtype=np.float64)

    @property
    def n_receivers(self) -> int:
        return len(self.ispl) - 1

    def __len__(self) -> int:
        return len(self.isrc)

    def segment(self, i: int) -> np.ndarray:
        return self.isrc[self.ispl[i]:self.ispl[i + 1]]


def dense_init(n_nodes: int) -> InteractionList:
    """Every node interacts with every node, lower radii zero."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    ispl = np.arange(n_nodes + 1, dtype=np.int64) * n_nodes
    isrc = np.arange(n_nodes * n_nodes, dtype=np.int64) % n_nodes
    return InteractionList(isrc, ispl, np.zeros(n_nodes * n_nodes))


def exclusive_scan_prepend0(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return out


def super_node_splits(n_topnodes: int, ngr: int = 32) -> np.ndarray:
    """Group the coarsest nodes into blocks of ``ngr``."""
    if ngr < 1:
        raise ValueError("ngr must be >= 1")
    spl = np.arange(0, n_topnodes, ngr, dtype=np.int64)
    return np.append(spl, n_topnodes)


@nb.njit(cache=True)
def _sort_segments(ispl, isrc, r_low):
    for i in range(ispl.shape[0] - 1):
        a = ispl[i]
        b = ispl[i + 1]
        # insertion sort on (r_low, isrc); segments are short
        for t in range(a + 1, b):
            r = r_low[t]
            s = isrc[t]
            u = t - 1
            while u >= a and (r_low[u] > r or (r_low[u] == r and isrc[u] > s)):
                r_low[u + 1] = r_low[u]
                isrc[u + 1] = isrc[u]
                u -= 1
            r_low[u + 1] = r
            isrc[u + 1] = s


def sort_segments(il: InteractionList) -> InteractionList:
    """Order each receiver's interactions by (r_low, source index)."""
    isrc = il.isrc.copy()
    r_low = il.r_low.copy()
    _sort_segments(il.ispl, isrc, r_low)
    return InteractionList(isrc, il.ispl.copy(), r_low, il.origin)
