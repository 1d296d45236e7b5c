"""Exception types shared across the package."""


class HyperfuseError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HyperfuseError, ValueError):
    pass


class EmptyMask(HyperfuseError, ValueError):
    pass


class DegenerateInput(HyperfuseError, ValueError):
    pass


class InvalidRange(HyperfuseError, ValueError):
    pass


class IndivisibleShape(HyperfuseError, ValueError):
    pass


class UnknownLayer(HyperfuseError, KeyError):
    pass


class UnknownTrigger(HyperfuseError, KeyError):
    pass


class EmptyDataset(HyperfuseError, ValueError):
    pass


class DivergenceDetected(HyperfuseError, RuntimeError):
    """Raised when an optimization loop blows up.

    The partial trajectory is kept on the exception so callers can still
    write it out.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory or [])
