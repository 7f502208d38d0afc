"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`SpatialDisaggError` so
callers (and the CLI) can map failure classes to exit codes without string
matching.
"""


class SpatialDisaggError(Exception):
    """Base class for all package-specific errors."""


class IsolatedRegionError(SpatialDisaggError, ValueError):
    """A weight-matrix row has no positive off-diagonal entry."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"region {index} has no neighbors; row standardization undefined")


class NoOverlapError(SpatialDisaggError, ValueError):
    """A record pair shares no jointly observed variable."""


class NearSingularError(SpatialDisaggError, ArithmeticError):
    """The spatial filter (I - rho*W) is numerically singular."""

    def __init__(self, rcond, message=None):
        self.rcond = rcond
        super().__init__(message or f"spatial filter near singular (reciprocal condition {rcond:.3e})")


class TooLargeError(SpatialDisaggError, ValueError):
    """A dense matrix would exceed the materialization cap."""


class RankDeficientError(SpatialDisaggError, ValueError):
    """The whitened design matrix does not have full column rank."""

    def __init__(self, columns, message=None):
        self.columns = tuple(columns)
        super().__init__(message or f"design matrix rank deficient; dependent columns {list(self.columns)}")


class CovarianceError(SpatialDisaggError, ArithmeticError):
    """A covariance matrix that must be positive definite is not."""


class ConvergenceError(SpatialDisaggError, RuntimeError):
    """Every optimizer start failed to produce a usable optimum."""

    def __init__(self, message, traces=None):
        self.traces = traces or []
        super().__init__(message)


class RedundantAnchorError(SpatialDisaggError, ValueError):
    """Anchoring constraints are linearly dependent."""

    def __init__(self, conflicting, message=None):
        self.conflicting = tuple(conflicting)
        super().__init__(message or f"redundant anchors on cells {list(self.conflicting)}")


class InfeasibleAnchorError(SpatialDisaggError, ValueError):
    """Anchor values contradict the aggregate they must sum to."""


class InsufficientDataError(SpatialDisaggError, ValueError):
    """A series has too few observed points to process."""


class ZeroVarianceError(SpatialDisaggError, ValueError):
    """A covariate column is constant where variation is required."""


class UndefinedMetricError(SpatialDisaggError, ValueError):
    """A metric denominator vanished for every contributing cell."""
