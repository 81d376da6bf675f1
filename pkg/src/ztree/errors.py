"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class ZTreeError(Exception):
    """Base class for all library errors."""


class ValidationError(ZTreeError, ValueError):
    """Input data rejected (NaN/Inf coordinates, bad shapes, k > N, ...)."""


class CapacityError(ZTreeError, RuntimeError):
    """A buffer could not hold the requested data.

    ``growth`` is the factor by which the capacity would have to grow.
    """

    def __init__(self, message: str, growth: float = float("nan")):
        super().__init__(message)
        self.growth = growth


class ProtocolError(ZTreeError, RuntimeError):
    """The rank simulator detected an undeliverable message or non-convergence."""
