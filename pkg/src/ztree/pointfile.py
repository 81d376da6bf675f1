"""Binary point files.

Layout (little-endian): magic ``JZPT``, version u32, dims u32, count u64,
flags u32 (bit0 mass, bit1 velocity, bit2 periodic), then the optional box
lengths (dims f64), positions (count x dims f64, row-major), optional
masses (count f64) and optional velocities (count x dims f64).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .points import PointSet

MAGIC = b"JZPT"
VERSION = 1
HAS_MASS = 1
HAS_VELOCITY = 2
PERIODIC = 4
_HEADER = struct.Struct("<4sIIQI")
_F64 = np.dtype("<f8")


class FormatError(ValidationError):
    """A point file is truncated, oversized or has a bad header."""


def write_points(path, points: PointSet) -> None:
    n, d = points.positions.shape
    flags = ((HAS_MASS if points.masses is not None else 0)
             | (HAS_VELOCITY if points.velocities is not None else 0)
             | (PERIODIC if points.periodic else 0))
    parts = [_HEADER.pack(MAGIC, VERSION, d, n, flags)]
    if points.periodic:
        parts.append(np.asarray(points.box, _F64).tobytes())
    parts.append(np.ascontiguousarray(points.positions, _F64).tobytes())
    if points.masses is not None:
        parts.append(np.asarray(points.masses, _F64).tobytes())
    if points.velocities is not None:
        parts.append(np.ascontiguousarray(points.velocities, _F64).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_points(path) -> PointSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a header")
    magic, version, d, n, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if d < 1 or flags & ~(HAS_MASS | HAS_VELOCITY | PERIODIC):
        raise FormatError(f"{path}: bad header (dims={d}, flags={flags:#x})")
    sizes = [d if flags & PERIODIC else 0, n * d, n if flags & HAS_MASS else 0,
             n * d if flags & HAS_VELOCITY else 0]
    expected = _HEADER.size + 8 * sum(sizes)
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    vals = np.frombuffer(raw, _F64, offset=_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise FormatError(f"{path}: non-finite values")
    cuts = np.cumsum(sizes)
    box, pos, mass, vel = np.split(vals, cuts[:-1])
    return PointSet(pos.reshape(n, d),
                    mass if flags & HAS_MASS else None,
                    vel.reshape(n, d) if flags & HAS_VELOCITY else None,
                    box if flags & PERIODIC else None)
