"""Brute-force references.

Nothing here imports the tree, bound or walk code; the only shared piece
is the distance contract (minimal image per periodic dimension), written
out again below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OracleConfig:
    metric: str = "euclidean"
    box: np.ndarray | None = None
    tie_rule: str = "lower-index-wins"


@dataclass
class OracleKnn:
    indices: np.ndarray
    distances: np.ndarray
    order: str = "input"


def _periods(box, d):
    if box is None:
        return np.zeros(d)
    b = np.asarray(box, dtype=np.float64)
    if b.ndim == 0:
        b = np.full(d, float(b))
    return np.where(np.isnan(b), 0.0, b)


def pair_distances(q: np.ndarray, s: np.ndarray, box=None) -> np.ndarray:
    """(len(q), len(s)) Euclidean distances with minimal-image wrapping."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if q.ndim == 1:
        q = q[:, None]
    if s.ndim == 1:
        s = s[:, None]
    P = _periods(box, q.shape[1])
    acc = np.zeros((q.shape[0], s.shape[0]))
    for a in range(q.shape[1]):
        dx = q[:, a, None] - s[None, :, a]
        if P[a] > 0:
            dx = dx - P[a] * np.floor(dx / P[a] + 0.5)
        acc += dx * dx
    return np.sqrt(acc)


def brute_knn(sources, queries=None, k: int = 1, box=None, block: int = 1024) -> OracleKnn:
    """All-pairs k nearest sources per query; ties go to the lower source index."""
    s = np.asarray(sources, dtype=np.float64)
    q = s if queries is None else np.asarray(queries, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if q.ndim == 1:
        q = q[:, None]
    if k > s.shape[0]:
        raise ValueError("k exceeds the number of sources")
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    dist = np.empty((q.shape[0], k))
    order_ids = np.arange(s.shape[0])
    for a in range(0, q.shape[0], block):
        D = pair_distances(q[a:a + block], s, box)
        for r in range(D.shape[0]):
            o = np.lexsort((order_ids, D[r]))[:k]
            idx[a + r] = o
            dist[a + r] = D[r, o]
    return OracleKnn(idx, dist)


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def brute_fof(points, r_link: float, box=None, block: int = 512) -> np.ndarray:
    """Union-find over every pair within r_link; label = minimum index of the component."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    parent = list(range(n))
    for a in range(0, n, block):
        D = pair_distances(x[a:a + block], x, box)
        rows, cols = np.nonzero(D <= r_link)
        for i, j in zip((rows + a).tolist(), cols.tolist()):
            if j <= i:
                continue
            ri, rj = _find(parent, i), _find(parent, j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    return np.array([_find(parent, i) for i in range(n)], dtype=np.int64)


def morton_key_sort(grid_points, bits: int) -> np.ndarray:
    """Stable sort by interleaved integer key, earlier dimensions more significant."""
    g = np.asarray(grid_points, dtype=np.int64)
    if g.ndim == 1:
        g = g[:, None]
    if np.any(g < 0) or np.any(g >= (1 << bits)):
        raise ValueError("grid coordinates out of range")
    d = g.shape[1]
    keys = []
    for row in g.tolist():
        key = 0
        for b in range(bits - 1, -1, -1):
            for a in range(d):
                key = (key << 1) | ((row[a] >> b) & 1)
        keys.append(key)
    return np.array(sorted(range(len(keys)), key=lambda i: keys[i]), dtype=np.int64)


def sample_bound_check(box1, box2, box=None, n_samples: int = 100, seed: int = 0):
    """(min, max) distance over uniformly sampled point pairs of two boxes.

    ``box1`` and ``box2`` are (center, half_extent) pairs.
    """
    rng = np.random.default_rng(seed)
    c1, h1 = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in box1)
    c2, h2 = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in box2)
    d = c1.shape[0]
    p = c1 + h1 * rng.uniform(-1.0, 1.0, size=(n_samples, d))
    q = c2 + h2 * rng.uniform(-1.0, 1.0, size=(n_samples, d))
    # include corners so extreme pairs are represented
    p[0], q[0] = c1 - h1, c2 + h2
    if n_samples > 1:
        p[1], q[1] = c1 + h1, c2 - h2
    P = _periods(box, d)
    dx = p - q
    per = P > 0
    dx[:, per] -= P[per] * np.floor(dx[:, per] / P[per] + 0.5)
    dist = np.sqrt((dx * dx).sum(axis=1))
    return float(dist.min()), float(dist.max())


def canonical_labels(labels) -> np.ndarray:
    """Relabel a partition so each element carries the minimum index of its class."""
    labels = np.asarray(labels)
    first = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        out[i] = first.setdefault(lab, i)
    return out
