"""Node-node distance bounds with optional minimal-image wrapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .points import periods

# Bounds are widened by this relative margin of the operands, so rounding in
# the center/extent arithmetic can only make them more cautious than the
# float distances between the enclosed points.
EPS = 1e-14


@dataclass
class Box:
    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        self.half_extent = np.atleast_1d(np.asarray(self.half_extent, dtype=np.float64))
        if np.any(self.half_extent < 0) or np.any(np.isnan(self.half_extent)):
            raise ValueError("half extents must be nonnegative")


@dataclass
class PeriodicDomain:
    lengths: np.ndarray   # one period per dimension, 0 = open

    @classmethod
    def open(cls, d: int) -> "PeriodicDomain":
        return cls(np.zeros(d))

    @classmethod
    def of(cls, box, d: int) -> "PeriodicDomain":
        if isinstance(box, PeriodicDomain):
            return box
        return cls(periods(box, d))


@nb.njit(cache=True, inline="always")
def _wrap(dx, period):
    if period > 0.0:
        return dx - period * math.floor(dx / period + 0.5)
    return dx


@nb.njit(cache=True, inline="always")
def _dlow_safe(c1, h1, i, c2, h2, j, L):
    s = 0.0
    for a in range(c1.shape[1]):
        dc = abs(_wrap(c1[i, a] - c2[j, a], L[a]))
        b = h1[i, a] + h2[j, a]
        if L[a] > 0.0 and (4.0 * h1[i, a] >= L[a] or 4.0 * h2[j, a] >= L[a]):
            continue
        v = dc - b - EPS * (dc + b + L[a])
        if v > 0.0:
            s += v * v
    return math.sqrt(s)


@nb.njit(cache=True, inline="always")
def _dup_safe(c1, h1, i, c2, h2, j, L):
    s = 0.0
    for a in range(c1.shape[1]):
        v = (abs(_wrap(c1[i, a] - c2[j, a], L[a])) + (h1[i, a] + h2[j, a])) * (1.0 + EPS) + EPS * L[a]
        s += v * v
    return math.sqrt(s) * (1.0 + EPS)


@nb.njit(cache=True, inline="always")
def _dist(a, b, L):
    s = 0.0
    for i in range(a.shape[0]):
        dx = _wrap(a[i] - b[i], L[i])
        s += dx * dx
    return math.sqrt(s)


def _domain(domain, d):
    if domain is None:
        return np.zeros(d)
    if isinstance(domain, PeriodicDomain):
        return np.asarray(domain.lengths, dtype=np.float64)
    return periods(domain, d)


def displacement(a, b, domain=None) -> np.ndarray:
    """a - b, reduced into [-P/2, P/2) along periodic dimensions."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    L = _domain(domain, a.shape[-1])
    dx = a - b
    per = L > 0
    if np.any(per):
        dx = np.where(per, dx - L * np.floor(dx / np.where(per, L, 1.0) + 0.5), dx)
    return dx


def distance(a, b, domain=None) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return float(_dist(a, b, _domain(domain, a.shape[0])))


def d_low(n1: Box, n2: Box, domain=None) -> float:
    """Guaranteed lower bound on the distance between any two points of the boxes."""
    L = _domain(domain, n1.center.shape[0])
    return float(_dlow_safe(n1.center[None], n1.half_extent[None], 0, n2.center[None], n2.half_extent[None], 0, L))


def d_up(n1: Box, n2: Box, domain=None) -> float:
    """Guaranteed upper bound on the distance between any two points of the boxes."""
    L = _domain(domain, n1.center.shape[0])
    return float(_dup_safe(n1.center[None], n1.half_extent[None], 0, n2.center[None], n2.half_extent[None], 0, L))
