"""Exception types shared across the package."""


class PrunePoolError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PrunePoolError):
    """Tensor or mask shapes are inconsistent with the operation's contract."""


class NonFiniteError(PrunePoolError):
    """A NaN or Inf appeared in an activation, loss, or gradient."""


class SpecError(PrunePoolError):
    """An architecture or run configuration violates its invariants."""


class FormatError(PrunePoolError):
    """A file on disk does not match the documented binary/JSON layout."""


class CalibrationMissing(PrunePoolError):
    """Evaluation requested stats for a (structure, resolution) pair that was never calibrated."""


class InfeasibleBudget(PrunePoolError):
    """No pruning rate on the grid satisfies the requested FLOPs cap."""
