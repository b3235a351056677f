"""Exception and warning types shared across the package.

Errors stop a computation; warnings flag degenerate-but-recoverable input and
go through the standard ``warnings`` channel so callers can escalate them.
"""


class ScootdidError(Exception):
    """Base class for every error raised by this package."""


# --- geometry / zone loading ---

class MalformedGeometryError(ScootdidError, ValueError):
    """Ring is not closed, self-intersects, or is otherwise invalid."""


class DuplicateIdError(ScootdidError, ValueError):
    """Two zone features share the same id."""


class UnsupportedGeometryTypeError(ScootdidError, ValueError):
    """Feature geometry is not a simple polygon (no multipolygons, no holes)."""


class GeographicCrsError(ScootdidError, ValueError):
    """Input declares geographic (lon/lat) coordinates; planar meters required."""


# --- panel / stream ingestion ---

class DuplicateKeyError(ScootdidError, ValueError):
    """Two count records share the same (zone, period, day, block, mode, direction)."""


class NegativeCountError(ScootdidError, ValueError):
    """A count cell is negative."""


class UnknownLabelError(ScootdidError, ValueError):
    """A categorical label is not one of the documented values."""


class UnsortedStreamError(ScootdidError, ValueError):
    """A per-device GPS stream is not strictly increasing in time."""


class MissingZoneError(ScootdidError, KeyError):
    """A referenced zone id is absent from the zone set."""


# --- statistics ---

class DegenerateVarianceError(ScootdidError, ValueError):
    """Values are constant; the statistic is undefined."""


class EmptyWeightsError(ScootdidError, ValueError):
    """Spatial weights have no positive entries."""


class DegenerateColumnError(ScootdidError, ValueError):
    """A column has zero variance and cannot be standardized."""


class KTooLargeError(ScootdidError, ValueError):
    """Requested more clusters than there are points."""


class UndefinedScoreError(ScootdidError, ValueError):
    """Cluster validity score undefined (k < 2, k = n, or zero within-scatter)."""


# --- regression ---

class MissingCovariateError(ScootdidError, KeyError):
    """A zone in the panel has no covariate row."""


class NonPositiveWorkingPopError(ScootdidError, ValueError):
    """log(working population) requested for a zone with no working population."""


class RankDeficientError(ScootdidError, ValueError):
    """Design matrix columns are linearly dependent."""


class SingleClusterError(ScootdidError, ValueError):
    """Clustered covariance needs at least two clusters."""


class EmptyCellError(ScootdidError, ValueError):
    """A model slice has no rows, or no treated/control rows."""


class UndefinedBaselineError(ScootdidError, ValueError):
    """Baseline level undefined for this (region, mode, direction) cell."""


class StageError(ScootdidError, RuntimeError):
    """A pipeline stage failed; carries the stage name for the CLI."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


# --- warnings ---

class ScootdidWarning(UserWarning):
    """Base class for warnings emitted by this package."""


class IslandZoneWarning(ScootdidWarning):
    """A zone has no neighbors under the requested contiguity rule."""


class DegenerateDistanceWarning(ScootdidWarning):
    """Coincident centroids made nearest-neighbor ties; broken by zone order."""


class DisconnectedGraphWarning(ScootdidWarning):
    """Connectivity graph is disconnected; clusters forced per component."""


class ZeroPopulationWarning(ScootdidWarning):
    """Zone population is zero; per-capita features set to a sentinel."""


class ConstantColumnWarning(ScootdidWarning):
    """A feature column is constant and was auto-rejected by screening."""


class EmptyCellWarning(ScootdidWarning):
    """A region lacks treated or control zones and was skipped."""


class NotConvergedWarning(ScootdidWarning):
    """Fit hit the iteration cap; result returned but flagged."""


class SeparationWarning(ScootdidWarning):
    """Fitted means over/underflowed; coefficients are at the search boundary."""
