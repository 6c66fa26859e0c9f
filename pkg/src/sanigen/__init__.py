"""Privacy-aware synthetic-data pipeline: object-level image sanitization,
formal privacy measurement, generation orchestration and utility evaluation."""

__version__ = "0.1.0"

from .errors import SanigenError
from .imaging import NoiseParams
from .sanitizer import (
    FeatureKind,
    Level,
    PrivacyPreference,
    SanitizationLevel,
    SanitizedBundle,
    SegmentRole,
    TaskKind,
    UserRequest,
    build_bundle,
)

__all__ = [
    "FeatureKind",
    "Level",
    "NoiseParams",
    "PrivacyPreference",
    "SanigenError",
    "SanitizationLevel",
    "SanitizedBundle",
    "SegmentRole",
    "TaskKind",
    "UserRequest",
    "build_bundle",
    "__version__",
]
