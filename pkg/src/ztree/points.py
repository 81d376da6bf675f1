"""Point containers and input validation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class PointSet:
    """Positions plus optional per-point masses and velocities.

    ``box`` holds one period per dimension; ``0`` (or ``None`` for the whole
    box) marks an open dimension.
    """

    positions: np.ndarray
    masses: np.ndarray | None = None
    velocities: np.ndarray | None = None
    box: np.ndarray | None = None
    types: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = as_positions(self.positions)
        n, d = self.positions.shape
        if self.masses is not None:
            self.masses = np.ascontiguousarray(self.masses, dtype=np.float64).reshape(n)
            if not np.all(np.isfinite(self.masses)):
                raise ValidationError("masses contain NaN or Inf")
        if self.velocities is not None:
            self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float64).reshape(n, d)
            if not np.all(np.isfinite(self.velocities)):
                raise ValidationError("velocities contain NaN or Inf")
        self.box = periods(self.box, d)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def periodic(self) -> bool:
        return bool(np.any(self.box > 0))


def as_positions(x, dtype=None) -> np.ndarray:
    """Return a C-contiguous (N, d) float array with -0.0 folded into +0.0.

    Raises ValidationError on NaN/Inf or a bad shape.
    """
    x = np.asarray(x)
    if dtype is None:
        dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = np.array(x, dtype=dtype, copy=True, order="C")
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError(f"positions must have shape (N, d), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("positions contain NaN or Inf")
    x += 0.0  # -0.0 + 0.0 == +0.0
    return x


def periods(box, d: int) -> np.ndarray:
    """Normalize a periodic-box description to a length-d float64 array (0 = open)."""
    if box is None:
        return np.zeros(d, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    if box.ndim == 0:
        box = np.full(d, float(box))
    box = np.where(np.isnan(box), 0.0, box).reshape(d)
    if np.any(box < 0) or not np.all(np.isfinite(box)):
        raise ValidationError("box periods must be finite and nonnegative")
    return np.ascontiguousarray(box)


def wrap_into_box(x: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Map coordinates of periodic dimensions into [0, P)."""
    x = np.array(x, dtype=np.float64, copy=True)
    for i, p in enumerate(box):
        if p > 0:
            x[:, i] = np.mod(x[:, i], p)
            x[x[:, i] >= p, i] = 0.0
    return x + 0.0
