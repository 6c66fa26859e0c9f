"""Privacy metrics.

Two complementary measurements:

* Normalized image mutual information: per reference image, the MI between
  a raw role canvas and the rendered composite of that image's shared
  payloads, divided by the raw canvas entropy, averaged over the corpus.
  Computed pixelwise on co-registered Gray8 canvases with a 256x256 joint
  histogram, in bits (log base 2).
* Semantic embedding similarity: mean cosine similarity between embeddings
  of private images and of server-generated synthetic images, plus the
  prompt-leakage variant against an empty-prompt baseline.

Embeddings are opaque vectors produced elsewhere (an embedding backend or a
file); this module never computes them.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .errors import (
    DegenerateReferenceError,
    DimensionMismatchError,
    IncompatibleEmbeddingsError,
    InvalidArgumentError,
)
from .sanitizer import SanitizedBundle, SegmentRole


@dataclass(frozen=True)
class EmbeddingVector:
    """An opaque semantic embedding tagged with its provider."""

    values: np.ndarray
    provider_id: str

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidArgumentError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("embedding contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def dimension(self) -> int:
        return int(self.values.size)


@dataclass
class ReferenceSet:
    """Per-image raw role canvases (co-registered, out-of-mask pixels zero)."""

    canvases: list[dict[SegmentRole, np.ndarray]]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.canvases:
            raise InvalidArgumentError("reference set must contain at least one image")
        if not self.names:
            self.names = [f"image-{i}" for i in range(len(self.canvases))]

    def __len__(self) -> int:
        return len(self.canvases)

    def canvas(self, index: int, role: SegmentRole) -> np.ndarray:
        try:
            return self.canvases[index][role]
        except KeyError:
            raise InvalidArgumentError(f"reference image {index} has no canvas for {role}") from None


def intensity_histogram(img: np.ndarray) -> np.ndarray:
    """256-bin intensity histogram of the full canvas (grayscale-converted)."""
    gray = imaging.to_grayscale(img)
    return np.bincount(gray.ravel(), minlength=256).astype(np.int64)


def entropy_bits(img: np.ndarray) -> float:
    """Shannon entropy of the intensity histogram, in bits (0·log 0 = 0)."""
    counts = intensity_histogram(img)
    total = counts.sum()
    p = counts[counts > 0] / total
    return -math.fsum(pi * math.log2(pi) for pi in p) + 0.0


def joint_histogram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """256x256 joint intensity histogram over co-located pixel pairs."""
    ga = imaging.to_grayscale(a)
    gb = imaging.to_grayscale(b)
    if ga.shape != gb.shape:
        raise DimensionMismatchError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    idx = ga.ravel().astype(np.int64) * 256 + gb.ravel().astype(np.int64)
    return np.bincount(idx, minlength=65536).reshape(256, 256)


def image_mi_bits(a: np.ndarray, b: np.ndarray) -> float:
    """Mutual information between two same-sized images, in bits.

    Symmetric; MI(a, a) equals the entropy of a; MI against a constant
    image is exactly 0.
    """
    joint = joint_histogram(a, b)
    total = joint.sum()
    pa = joint.sum(axis=1) / total
    pb = joint.sum(axis=0) / total
    rows, cols = np.nonzero(joint)
    pab = joint[rows, cols] / total
    terms = pab * (np.log2(pab) - np.log2(pa[rows]) - np.log2(pb[cols]))
    return math.fsum(terms.tolist())


def normalized_mi_terms(
    refs: ReferenceSet, bundle: SanitizedBundle, role: SegmentRole
) -> list[float]:
    """Per-image MI(raw canvas, rendered payloads) / entropy(raw canvas)."""
    if len(refs) != len(bundle.images):
        raise InvalidArgumentError(
            f"reference set has {len(refs)} images but bundle has {len(bundle.images)}"
        )
    terms = []
    for i in range(len(refs)):
        raw = refs.canvas(i, role)
        h = entropy_bits(raw)
        if h <= 0.0:
            raise DegenerateReferenceError(
                f"reference image {i} has a constant {role.kind} canvas (zero entropy)"
            )
        mi = image_mi_bits(raw, bundle.render(i))
        terms.append(min(max(mi / h, 0.0), 1.0))
    return terms


def normalized_mi(refs: ReferenceSet, bundle: SanitizedBundle, role: SegmentRole) -> float:
    """Average per-image leakage fraction for one role, clamped to [0, 1]."""
    terms = normalized_mi_terms(refs, bundle, role)
    return min(max(math.fsum(terms) / len(terms), 0.0), 1.0)


def _check_compatible(vectors: Sequence[EmbeddingVector]) -> None:
    providers = {v.provider_id for v in vectors}
    if len(providers) > 1:
        raise IncompatibleEmbeddingsError(f"mixed embedding providers: {sorted(providers)}")
    dims = {v.dimension for v in vectors}
    if len(dims) > 1:
        raise IncompatibleEmbeddingsError(f"mixed embedding dimensions: {sorted(dims)}")


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    _check_compatible([a, b])
    na = np.linalg.norm(a.values)
    nb = np.linalg.norm(b.values)
    if na == 0.0 or nb == 0.0:
        raise InvalidArgumentError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a.values, b.values) / (na * nb))


def sim(
    P: Sequence[EmbeddingVector],
    Q: Sequence[EmbeddingVector],
    *,
    matched_pairs: bool = False,
) -> float:
    """Mean cosine similarity between two embedding sets.

    Default is the mean over all |P|x|Q| cross pairs; ``matched_pairs``
    restricts to index-aligned pairs (requires equal lengths).
    """
    if not P or not Q:
        raise InvalidArgumentError("sim requires non-empty embedding sets")
    _check_compatible(list(P) + list(Q))
    if matched_pairs:
        if len(P) != len(Q):
            raise InvalidArgumentError("matched-pair sim requires equally sized sets")
        return math.fsum(cosine(p, q) for p, q in zip(P, Q)) / len(P)
    values = [cosine(p, q) for p in P for q in Q]
    return math.fsum(values) / len(values)


def prompt_sim(
    prompt_embedding: EmbeddingVector,
    private_image_embeddings: Sequence[EmbeddingVector],
    baseline_embedding: EmbeddingVector,
) -> tuple[float, float]:
    """Prompt-leakage similarity and its empty-prompt baseline, side by side."""
    value = sim([prompt_embedding], private_image_embeddings)
    baseline = sim([baseline_embedding], private_image_embeddings)
    return value, baseline


@dataclass
class RolePrivacy:
    role: SegmentRole
    mi: float
    sim: float | None


@dataclass
class PromptLeakage:
    value: float
    baseline: float


@dataclass
class PrivacyReport:
    """One preference's leakage figures: per-role MI and SIM plus the
    prompt-leakage pair."""

    preference: str
    roles: list[RolePrivacy]
    prompt: PromptLeakage | None = None

    def for_role(self, role: SegmentRole) -> RolePrivacy:
        for entry in self.roles:
            if entry.role == role:
                return entry
        raise InvalidArgumentError(f"report has no entry for role {role}")


def privacy_report(
    refs: ReferenceSet,
    bundle: SanitizedBundle,
    private_embeddings_by_role: dict[SegmentRole, Sequence[EmbeddingVector]] | None = None,
    synthetic_embeddings_by_role: dict[SegmentRole, Sequence[EmbeddingVector]] | None = None,
    prompt_embeddings: tuple[EmbeddingVector, Sequence[EmbeddingVector], EmbeddingVector] | None = None,
) -> PrivacyReport:
    """Assemble the per-role MI/SIM report for one sanitized bundle.

    SIM entries are filled for roles present in both embedding mappings;
    ``prompt_embeddings`` is (prompt, private images, empty-prompt baseline).
    """
    request = bundle.request
    rows = []
    for role in request.roles:
        mi = normalized_mi(refs, bundle, role)
        sim_value = None
        private = (private_embeddings_by_role or {}).get(role)
        synthetic = (synthetic_embeddings_by_role or {}).get(role)
        if private and synthetic:
            sim_value = sim(private, synthetic)
        rows.append(RolePrivacy(role, mi, sim_value))
    prompt = None
    if prompt_embeddings is not None:
        value, baseline = prompt_sim(*prompt_embeddings)
        prompt = PromptLeakage(value, baseline)
    return PrivacyReport(bundle.preference.spell(request), rows, prompt)
