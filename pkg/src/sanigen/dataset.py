"""Labeled synthetic-sample containers shared by the generation and
evaluation layers.

Classification samples carry a class-name label; detection samples carry a
list of ``(object_id, BBox)`` pairs where ``object_id`` is the target-role
index.  Every sample records its provenance (prompt, preference, strategy,
seed) so mixtures and reports stay traceable.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import InvalidArgumentError
from .sanitizer import TaskKind, UserRequest


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel units."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InvalidArgumentError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence must be in [0, 1], got {self.confidence}")


DetectionLabel = list[tuple[int, BBox]]
Label = Union[str, DetectionLabel]


@dataclass
class Provenance:
    prompt: str
    preference: str
    strategy: str
    seed: int
    source: str = ""


@dataclass
class SyntheticSample:
    image: np.ndarray
    label: Label
    provenance: Provenance
    target_mask: np.ndarray | None = None


@dataclass
class SyntheticDataset:
    request: UserRequest
    samples: list[SyntheticSample] = field(default_factory=list)
    seed: int = 0

    @property
    def task_kind(self) -> TaskKind:
        return self.request.task_kind

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> Counter:
        if self.task_kind is TaskKind.DETECTION:
            return Counter(len(s.label) for s in self.samples)
        return Counter(s.label for s in self.samples)

    def validate_labels(self) -> None:
        classes = set(self.request.label_classes)
        for i, sample in enumerate(self.samples):
            if self.task_kind is TaskKind.CLASSIFICATION:
                if sample.label not in classes:
                    raise InvalidArgumentError(
                        f"sample {i} label {sample.label!r} is not a request class"
                    )
            else:
                h, w = sample.image.shape[:2]
                for _, box in sample.label:
                    x0, y0, x1, y1 = box.as_xyxy()
                    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                        raise InvalidArgumentError(f"sample {i} box {box} exceeds image bounds")
