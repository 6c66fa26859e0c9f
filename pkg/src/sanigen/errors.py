"""Exception hierarchy.

Every error raised by this package derives from :class:`SanigenError` and
carries a stable machine-readable ``code`` used by the CLI and the wire
protocol's error envelopes.
"""

from __future__ import annotations


class SanigenError(Exception):
    """Base class for all package errors."""

    code = "error"
    retryable = False


class InvalidArgumentError(SanigenError):
    code = "invalid-argument"


class DimensionMismatchError(InvalidArgumentError):
    code = "dimension-mismatch"


class IncompleteSegmentationError(SanigenError):
    """A target role in the request has no mask in the manifest."""

    code = "incomplete-segmentation"

    def __init__(self, message: str, role=None):
        super().__init__(message)
        self.role = role


class UnsupportedFeatureError(SanigenError):
    code = "unsupported-feature"


class BackendUnavailableError(SanigenError):
    code = "backend-unavailable"
    retryable = True


class InconsistentBundleError(SanigenError):
    code = "inconsistent-bundle"


class PlacementInfeasibleError(SanigenError):
    code = "placement-infeasible"


class GenerationFailedError(SanigenError):
    code = "generation-failed"


class TrainingFailedError(SanigenError):
    code = "training-failed"


class IncompatibleDatasetsError(SanigenError):
    code = "incompatible-datasets"


class IncompatibleEmbeddingsError(SanigenError):
    code = "incompatible-embeddings"


class DegenerateReferenceError(SanigenError):
    code = "degenerate-reference"


class UnsplittableClassError(SanigenError):
    code = "unsplittable-class"


class UndefinedMetricError(SanigenError):
    code = "undefined-metric"


class SchemaError(SanigenError):
    """A wire document failed validation; ``field`` is the offending path."""

    code = "schema"

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class NotFoundError(SanigenError):
    code = "not-found"
