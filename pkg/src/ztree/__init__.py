"""Morton plane-based tree hierarchies with exact kNN and friends-of-friends."""

from .errors import CapacityError, ProtocolError, ValidationError, ZTreeError
from .points import PointSet

__version__ = "0.1.0"

__all__ = ["PointSet", "ZTreeError", "ValidationError", "CapacityError", "ProtocolError"]
