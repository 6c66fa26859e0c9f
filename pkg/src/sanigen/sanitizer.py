"""Device-side sanitization pipeline.

Takes a user request, reference images and an externally produced
segmentation manifest, splits each image into role-labeled full-canvas
segments (out-of-mask pixels zeroed, so all segments of one image stay
co-registered), applies the per-role sanitization scheme, and emits the
sanitized bundle — the only thing that ever crosses to the server.

Sanitization levels:

* ``L0`` shares the text description only.
* ``L1`` shares text plus a derived feature image (canny natively; pose and
  layout_box via an external feature extractor).
* ``L2`` shares text plus the raw segment canvas.

An optional Gaussian-noise modifier can be attached to any level; it is
applied to the segment canvas right after extraction (before feature
derivation by default — the order is configurable).
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import imaging
from .errors import (
    BackendUnavailableError,
    DimensionMismatchError,
    IncompleteSegmentationError,
    InvalidArgumentError,
    UnsupportedFeatureError,
)
from .imaging import NoiseParams


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    DETECTION = "detection"


class Level(str, Enum):
    L0 = "L0"
    L1 = "L1"
    L2 = "L2"


class FeatureKind(str, Enum):
    CANNY = "canny"
    POSE = "pose"
    LAYOUT_BOX = "layout_box"


@dataclass(frozen=True)
class UserRequest:
    """What the user asks the server to train.

    ``target_objects`` and ``background`` drive both segmentation roles and
    generation prompts; ``label_classes`` become the per-class prompts for
    classification tasks (detection may leave them empty — the label is the
    object location).
    """

    target_objects: tuple[str, ...]
    background: str
    training_objective: str
    label_classes: tuple[str, ...]
    task_kind: TaskKind

    def __post_init__(self):
        object.__setattr__(self, "target_objects", tuple(self.target_objects))
        object.__setattr__(self, "label_classes", tuple(self.label_classes))
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if not self.target_objects:
            raise InvalidArgumentError("request needs at least one target object")
        if any(not t.strip() for t in self.target_objects):
            raise InvalidArgumentError("target object descriptions must be non-empty")
        if not self.background.strip():
            raise InvalidArgumentError("background description must be non-empty")
        if self.task_kind is TaskKind.CLASSIFICATION and len(self.label_classes) < 2:
            raise InvalidArgumentError("classification requires at least 2 label classes")

    @property
    def roles(self) -> tuple["SegmentRole", ...]:
        targets = tuple(SegmentRole.target(i) for i in range(len(self.target_objects)))
        return targets + (SegmentRole.background(),)

    def text_for(self, role: "SegmentRole") -> str:
        if role.is_background:
            return self.background
        if role.index >= len(self.target_objects):
            raise InvalidArgumentError(f"target index {role.index} out of range")
        return self.target_objects[role.index]


@dataclass(frozen=True, order=True)
class SegmentRole:
    """A segment identity: the background or the i-th target object."""

    kind: str
    index: int = 0

    TARGET = "target"
    BACKGROUND = "background"

    def __post_init__(self):
        if self.kind not in (self.TARGET, self.BACKGROUND):
            raise InvalidArgumentError(f"unknown role kind {self.kind!r}")
        if self.index < 0:
            raise InvalidArgumentError("role index must be >= 0")

    @classmethod
    def target(cls, index: int = 0) -> "SegmentRole":
        return cls(cls.TARGET, index)

    @classmethod
    def background(cls) -> "SegmentRole":
        return cls(cls.BACKGROUND, 0)

    @property
    def is_target(self) -> bool:
        return self.kind == self.TARGET

    @property
    def is_background(self) -> bool:
        return self.kind == self.BACKGROUND

    def key(self, n_targets: int = 1) -> str:
        """Stable textual key: ``b``, ``t`` (single target) or ``t1``, ``t2``…"""
        if self.is_background:
            return "b"
        return "t" if n_targets == 1 else f"t{self.index + 1}"

    @classmethod
    def parse(cls, key: str) -> "SegmentRole":
        key = key.strip()
        if key == "b":
            return cls.background()
        if key == "t":
            return cls.target(0)
        if key.startswith("t") and key[1:].isdigit():
            idx = int(key[1:])
            if idx >= 1:
                return cls.target(idx - 1)
        raise InvalidArgumentError(f"cannot parse role key {key!r}")


@dataclass(frozen=True)
class SanitizationLevel:
    """One role's scheme: the level, the L1 feature kind, and an optional
    noise modifier applied to the segment before export."""

    level: Level
    feature_kind: FeatureKind | None = None
    noise: NoiseParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        if self.feature_kind is not None:
            object.__setattr__(self, "feature_kind", FeatureKind(self.feature_kind))
        if (self.level is Level.L1) != (self.feature_kind is not None):
            raise InvalidArgumentError("feature_kind must be present exactly when level is L1")

    @property
    def payload_kind(self) -> str:
        return {Level.L0: "none", Level.L1: "feature", Level.L2: "raw"}[self.level]

    def spell(self) -> str:
        text = self.level.value
        if self.feature_kind is not None:
            text += f":{self.feature_kind.value}"
        if self.noise is not None:
            text += f"+noise{self.noise.sigma:g}"
        return text


@dataclass(frozen=True)
class PrivacyPreference:
    """Total map from segment role to sanitization level."""

    levels: Mapping[SegmentRole, SanitizationLevel]

    def __post_init__(self):
        object.__setattr__(self, "levels", dict(self.levels))

    def for_role(self, role: SegmentRole) -> SanitizationLevel:
        try:
            return self.levels[role]
        except KeyError:
            raise InvalidArgumentError(f"preference has no entry for role {role}") from None

    def validate_for(self, request: UserRequest) -> None:
        required = set(request.roles)
        present = set(self.levels)
        if present != required:
            missing = {r.key(len(request.target_objects)) for r in required - present}
            extra = {r.key(len(request.target_objects)) for r in present - required}
            raise InvalidArgumentError(
                f"preference must cover every role exactly once (missing: {sorted(missing)}, "
                f"unexpected: {sorted(extra)})"
            )

    def spell(self, request: UserRequest) -> str:
        n = len(request.target_objects)
        parts = [f"{r.key(n)}={self.levels[r].spell()}" for r in request.roles]
        return ",".join(parts)


def parse_level(text: str) -> SanitizationLevel:
    """Parse one level spelling: ``L0``, ``L1``, ``L1:pose``, ``L2+noise5``.

    ``L1`` without a feature suffix defaults to canny.  ``+noise<sigma>``
    attaches a Gaussian-noise modifier (seed 0; the bundle seed still mixes
    into the per-image draws).
    """
    text = text.strip()
    noise = None
    if "+noise" in text:
        text, _, sigma_text = text.partition("+noise")
        try:
            noise = NoiseParams(float(sigma_text))
        except ValueError:
            raise InvalidArgumentError(f"bad noise sigma in level spelling: {sigma_text!r}") from None
    name, _, feature = text.partition(":")
    try:
        level = Level(name.strip())
    except ValueError:
        raise InvalidArgumentError(f"unknown sanitization level {name!r}") from None
    kind = None
    if level is Level.L1:
        kind = FeatureKind(feature.strip()) if feature.strip() else FeatureKind.CANNY
    elif feature.strip():
        raise InvalidArgumentError(f"feature suffix only applies to L1, got {text!r}")
    return SanitizationLevel(level, kind, noise)


def parse_preference(spec: str, request: UserRequest) -> PrivacyPreference:
    """Parse a preference spelling like ``t=L2,b=L0`` or ``t1=L0,t2=L1,b=L2``."""
    levels: dict[SegmentRole, SanitizationLevel] = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise InvalidArgumentError(f"preference entry {part!r} is not role=level")
        role = SegmentRole.parse(key)
        if role in levels:
            raise InvalidArgumentError(f"duplicate preference entry for role {key!r}")
        levels[role] = parse_level(value)
    preference = PrivacyPreference(levels)
    preference.validate_for(request)
    return preference


@dataclass
class ManifestImage:
    """Segmentation output for one reference image: per-target masks with
    detector confidences.  The background mask is always derived as the
    complement of the union of target masks at ingestion."""

    name: str
    target_masks: dict[int, np.ndarray] = field(default_factory=dict)
    confidences: dict[int, float] = field(default_factory=dict)

    def union_mask(self) -> np.ndarray:
        masks = list(self.target_masks.values())
        union = np.zeros_like(masks[0]) if masks else None
        for m in masks:
            union |= m
        return union


@dataclass
class SegmentationManifest:
    images: list[ManifestImage]

    def entry_for(self, name: str) -> ManifestImage:
        for entry in self.images:
            if entry.name == name:
                return entry
        raise InvalidArgumentError(f"manifest has no entry for image {name!r}")


@dataclass
class SanitizedSegment:
    role: SegmentRole
    text: str
    scheme: SanitizationLevel
    payload: np.ndarray | None

    def __post_init__(self):
        kind = self.scheme.payload_kind
        if (self.payload is None) != (kind == "none"):
            raise InvalidArgumentError(f"{kind} scheme incompatible with payload presence")

    @property
    def payload_kind(self) -> str:
        return self.scheme.payload_kind


@dataclass
class BundleImage:
    name: str
    segments: list[SanitizedSegment]


@dataclass
class SanitizedBundle:
    """The complete device-to-server payload."""

    request: UserRequest
    preference: PrivacyPreference
    width: int
    height: int
    images: list[BundleImage]
    seed: int = 0

    def render(self, index: int) -> np.ndarray:
        return render_bundle_canvas(self.images[index].segments, self.width, self.height)


FeatureExtractor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def split_segments(
    img: np.ndarray, manifest_image: ManifestImage, request: UserRequest
) -> list[tuple[SegmentRole, np.ndarray]]:
    """Split one image into full-canvas role segments.

    Every target role must have a manifest mask; the background segment is
    the complement of the union of target masks, so the role canvases always
    recompose to the original image.
    """
    imaging.ensure_image(img)
    n_targets = len(request.target_objects)
    for idx in manifest_image.target_masks:
        if idx >= n_targets:
            raise InvalidArgumentError(
                f"manifest target index {idx} out of range for {n_targets} target(s)"
            )
    segments: list[tuple[SegmentRole, np.ndarray]] = []
    union = np.zeros(img.shape[:2], dtype=np.bool_)
    for i in range(n_targets):
        role = SegmentRole.target(i)
        mask = manifest_image.target_masks.get(i)
        if mask is None:
            raise IncompleteSegmentationError(
                f"no mask for target role {role.key(n_targets)} "
                f"({request.target_objects[i]!r})",
                role=role,
            )
        imaging.ensure_mask(mask, like=img)
        segments.append((role, imaging.apply_mask(img, mask)))
        union |= mask
    segments.append((SegmentRole.background(), imaging.apply_mask(img, ~union)))
    return segments


def role_mask(manifest_image: ManifestImage, role: SegmentRole) -> np.ndarray:
    if role.is_background:
        return ~manifest_image.union_mask()
    return manifest_image.target_masks[role.index]


def sanitize_segment(
    role: SegmentRole,
    canvas: np.ndarray,
    level: SanitizationLevel,
    request: UserRequest,
    *,
    mask: np.ndarray | None = None,
    feature_extractors: Mapping[FeatureKind, FeatureExtractor] | None = None,
    noise_seed: int | None = None,
    noise_before_features: bool = True,
) -> SanitizedSegment:
    """Apply one role's scheme to its segment canvas.

    ``mask`` marks the role's pixels (the noise modifier only touches
    those); when omitted it falls back to the canvas's nonzero pixels.
    """
    text = request.text_for(role)
    if mask is None:
        mask = canvas != 0 if canvas.ndim == 2 else np.any(canvas != 0, axis=2)

    def noised(image: np.ndarray) -> np.ndarray:
        if level.noise is None:
            return image
        params = level.noise
        if noise_seed is not None:
            params = NoiseParams(params.sigma, noise_seed)
        return imaging.add_gaussian_noise(image, mask, params)

    if level.level is Level.L0:
        return SanitizedSegment(role, text, level, None)

    if level.level is Level.L2:
        return SanitizedSegment(role, text, level, noised(canvas))

    source = noised(canvas) if noise_before_features else canvas
    if level.feature_kind is FeatureKind.CANNY:
        payload = imaging.canny_edges(source)
    else:
        extractor = (feature_extractors or {}).get(level.feature_kind)
        if extractor is None:
            raise BackendUnavailableError(
                f"no feature extractor available for {level.feature_kind.value!r}"
            )
        payload = extractor(source, mask)
        imaging.ensure_image(payload)
        if payload.shape[:2] != canvas.shape[:2]:
            raise UnsupportedFeatureError(
                f"feature extractor returned {payload.shape[:2]}, expected {canvas.shape[:2]}"
            )
    if not noise_before_features and level.noise is not None:
        payload = noised(payload)
    return SanitizedSegment(role, text, level, payload)


def _derived_noise_seed(bundle_seed: int, base_seed: int, image_index: int, role_ordinal: int) -> int:
    seq = np.random.SeedSequence((bundle_seed, base_seed, image_index, role_ordinal))
    return int(seq.generate_state(1, np.uint64)[0])


def build_bundle(
    request: UserRequest,
    images: Sequence[tuple[str, np.ndarray]],
    manifest: SegmentationManifest,
    preference: PrivacyPreference,
    *,
    seed: int = 0,
    feature_extractors: Mapping[FeatureKind, FeatureExtractor] | None = None,
    noise_before_features: bool = True,
) -> SanitizedBundle:
    """Sanitize a reference corpus into one bundle.

    All images must share one canvas size.  Noise seeds are derived from
    (bundle seed, image index, role) so the output is deterministic no
    matter how the per-image work is scheduled.
    """
    preference.validate_for(request)
    if not images:
        raise InvalidArgumentError("bundle needs at least one reference image")
    first = images[0][1]
    imaging.ensure_image(first)
    height, width = first.shape[:2]
    n_targets = len(request.target_objects)
    entries: list[BundleImage] = []
    for image_index, (name, img) in enumerate(images):
        try:
            imaging.ensure_image(img)
            if img.shape[:2] != (height, width):
                raise DimensionMismatchError(
                    f"expected {width}x{height} canvas, got {img.shape[1]}x{img.shape[0]}"
                )
            manifest_image = manifest.entry_for(name)
            segments = []
            for role_ordinal, (role, canvas) in enumerate(
                split_segments(img, manifest_image, request)
            ):
                level = preference.for_role(role)
                noise_seed = None
                if level.noise is not None:
                    noise_seed = _derived_noise_seed(
                        seed, level.noise.seed, image_index, role_ordinal
                    )
                segments.append(
                    sanitize_segment(
                        role,
                        canvas,
                        level,
                        request,
                        mask=role_mask(manifest_image, role),
                        feature_extractors=feature_extractors,
                        noise_seed=noise_seed,
                        noise_before_features=noise_before_features,
                    )
                )
            entries.append(BundleImage(name, segments))
        except Exception as exc:
            if exc.args and isinstance(exc.args[0], str):
                exc.args = (f"image {image_index} ({name!r}): {exc.args[0]}",) + exc.args[1:]
            raise
    return SanitizedBundle(request, preference, width, height, entries, seed)


def render_bundle_canvas(
    segments: Sequence[SanitizedSegment], width: int | None = None, height: int | None = None
) -> np.ndarray:
    """Render one bundle entry's shared pixel payloads onto a single canvas.

    Starts from all-zero, pastes the background payload first and the target
    payloads on top (ascending index); text-only segments contribute
    nothing.  Used for privacy measurement against the raw role canvases.
    """
    payloads = [s for s in segments if s.payload is not None]
    if width is None or height is None:
        if not payloads:
            raise InvalidArgumentError(
                "cannot infer canvas size for a payload-free entry; pass width and height"
            )
        height, width = payloads[0].payload.shape[:2]
    for seg in payloads:
        if seg.payload.shape[:2] != (height, width):
            raise DimensionMismatchError(
                f"segment {seg.role} payload is {seg.payload.shape[:2]}, "
                f"expected {(height, width)}"
            )
    channels = max((imaging.channel_count(s.payload) for s in payloads), default=1)
    channels = 3 if channels >= 3 else 1
    shape = (height, width) if channels == 1 else (height, width, 3)
    canvas = np.zeros(shape, dtype=np.uint8)
    ordered = sorted(payloads, key=lambda s: (s.role.is_target, s.role.index))
    for seg in ordered:
        payload = seg.payload
        nz = payload != 0 if payload.ndim == 2 else np.any(payload[:, :, :3] != 0, axis=2)
        if channels == 3 and payload.ndim == 2:
            payload = np.repeat(payload[:, :, None], 3, axis=2)
        elif payload.ndim == 3:
            payload = payload[:, :, :3]
            if channels == 1:
                payload = imaging.to_grayscale(payload)
        canvas[nz] = payload[nz]
    return canvas


def split_corpus(
    images: Sequence[tuple[str, np.ndarray]],
    manifest: SegmentationManifest,
    request: UserRequest,
) -> list[dict[SegmentRole, np.ndarray]]:
    """Raw role canvases per image (the reference side of privacy metrics)."""
    out = []
    for name, img in images:
        entry = manifest.entry_for(name)
        out.append(dict(split_segments(img, entry, request)))
    return out
