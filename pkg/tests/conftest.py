"""Shared procedural corpora for the test suite.

Reference images are smooth low-frequency color fields with mild sensor
noise (natural-image statistics, deterministic per seed); target masks are
random ellipses placed inside the canvas.
"""

from __future__ import annotations

import numpy as np
import pytest

from sanigen.sanitizer import (
    ManifestImage,
    PrivacyPreference,
    SanitizationLevel,
    SegmentationManifest,
    SegmentRole,
    TaskKind,
    UserRequest,
)


def natural_image(seed: int, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / float(size)
    img = np.zeros((h, w, 3))
    for c in range(3):
        f = np.zeros((h, w))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            f += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        f = (f - f.min()) / max(np.ptp(f), 1e-9)
        img[:, :, c] = f * 255
    return np.clip(img + rng.normal(0, 6, (h, w, 3)), 0, 255).astype(np.uint8)


def blob_mask(seed: int, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed + 999)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = rng.uniform(0.35, 0.65, 2) * w
    rx, ry = rng.uniform(0.18, 0.32, 2) * w
    return (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0


def make_corpus(n: int = 5, size: int = 64, seed: int = 0):
    images = [(f"ref{i}.png", natural_image(seed * 1000 + i, size)) for i in range(n)]
    manifest = SegmentationManifest(
        [
            ManifestImage(name, {0: blob_mask(seed * 1000 + i, size)}, {0: 0.9})
            for i, (name, _) in enumerate(images)
        ]
    )
    return images, manifest


def level(spec: str) -> SanitizationLevel:
    from sanigen.sanitizer import parse_level

    return parse_level(spec)


def preference(t: str, b: str, extra_targets: dict[int, str] | None = None) -> PrivacyPreference:
    levels = {SegmentRole.target(0): level(t), SegmentRole.background(): level(b)}
    for idx, spec in (extra_targets or {}).items():
        levels[SegmentRole.target(idx)] = level(spec)
    return PrivacyPreference(levels)


@pytest.fixture
def husky_request() -> UserRequest:
    return UserRequest(
        ("dog",),
        "bedroom",
        "a model that tells what my dog is doing",
        ("eating", "sitting", "sleeping", "playing"),
        TaskKind.CLASSIFICATION,
    )


@pytest.fixture
def bottle_request() -> UserRequest:
    return UserRequest(
        ("pill bottle",),
        "bedroom",
        "find the pill bottle",
        (),
        TaskKind.DETECTION,
    )


@pytest.fixture
def small_corpus():
    return make_corpus(n=5, size=64, seed=1)
