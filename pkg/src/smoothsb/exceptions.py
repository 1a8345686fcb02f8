"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`SmoothSBError` so
callers (notably the CLI) can map failures to exit codes in one place.
"""


class SmoothSBError(Exception):
    """Base class for all library errors."""


class UnsupportedOrder(SmoothSBError):
    """Kernel order outside the supported range (m must be in 1..4)."""


class NotHurwitz(SmoothSBError):
    """Drift matrix has an eigenvalue with nonnegative real part, so no
    stationary covariance exists (e.g. integrated Brownian motion)."""


class DegenerateVariance(SmoothSBError):
    """A derivative coordinate has zero stationary variance but more than
    one grid cell was requested for it."""


class SingularLambda(SmoothSBError):
    """Innovation covariance not invertible even after PSD repair and
    jitter."""


class AllNegInfMessage(SmoothSBError):
    """An entire message vector collapsed to -inf: the cell grid is too
    narrow to connect the observed supports."""


class ZeroMarginalMass(SmoothSBError):
    """A support point with positive target weight received zero implied
    mass (infeasible support connection)."""


class SizeCapExceeded(SmoothSBError):
    """Dense oracle tensor would exceed the configured entry cap."""


class SingularGram(SmoothSBError):
    """Joint position covariance singular even after one jitter retry."""


class ParseError(SmoothSBError):
    """Malformed snapshot CSV; ``row`` is the 1-based offending line."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class InconsistentDimension(SmoothSBError):
    """Snapshot rows disagree on the observation dimension."""


class MissingGroundTruth(SmoothSBError):
    """Tracking metrics requested but no trajectory labels available."""


class EmptyCloud(SmoothSBError):
    """Point-cloud metric called with an empty point set."""


class UnequalSupportSizes(SmoothSBError):
    """Baseline matcher requires the same number of points at every step."""


class StartNotInSupport(SmoothSBError):
    """Requested trajectory start index is not a step-0 support point."""


class NotConvergedWarning(UserWarning):
    """Soft signal: beliefs were requested from a non-converged state."""
