"""Exception types shared across the pipeline.

The CLI maps these onto its exit-code contract: input/validation problems
exit 1, algorithmic failures exit 2, degraded runs exit 3.
"""


class SemregError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SemregError):
    """Bad input data or configuration (CLI exit 1)."""


class ConfigError(ValidationError):
    """Configuration field failed validation; message carries the field path."""


class MeshFormatError(ValidationError):
    """Mesh file could not be parsed (non-triangular faces, bad header, ...)."""


class NonPositiveDepth(SemregError):
    """Point is behind or on the camera plane (Z <= 1e-9 m)."""


class InsufficientObservations(ValidationError):
    """Fewer than the minimum number of calibration observations."""


class DegenerateGeometry(ValidationError):
    """Calibration world points are collinear; the problem is unsolvable."""


class EmptyObservations(ValidationError):
    """Observation list is empty."""


class EmptyView(SemregError):
    """No ray hit the mesh from this viewpoint."""


class NoValidViews(SemregError):
    """Every view of a candidate-library grid was empty."""


class EmptyCrop(ValidationError):
    """Label crop produced an empty cloud."""


class NoCorrespondences(SemregError):
    """Zero ICP pairs survived distance rejection at the seed pose."""


class AllCandidatesFailed(SemregError):
    """Every candidate crop raised NoCorrespondences."""


class TrackingLost(SemregError):
    """Frame-to-model tracking residual exceeded the loss threshold."""


class UnknownLabel(ValidationError):
    """An estimated label has no ground-truth counterpart."""


class IoFailure(SemregError):
    """Report files could not be written."""
