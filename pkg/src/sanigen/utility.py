"""Specialized-model utility measurement.

Covers dataset splitting, classification accuracy, IoU and mAP at the 0.5
IoU threshold for detection, and dispatch of training jobs to a pluggable
training backend.  mAP uses all-points interpolation (area under the
precision envelope) with greedy one-to-one matching by descending
confidence, each detection taking the unmatched ground truth of highest
IoU.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .dataset import BBox, Detection, DetectionLabel, SyntheticDataset
from .errors import (
    InvalidArgumentError,
    TrainingFailedError,
    UndefinedMetricError,
    UnsplittableClassError,
)
from .sanitizer import TaskKind

DEFAULT_TRAIN_FRACTION = 0.8


@dataclass
class UtilityReport:
    metric: str
    value: float
    split: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InvalidArgumentError(f"metric value {self.value} outside [0, 1]")


def split_dataset(
    ds: SyntheticDataset, train_fraction: float = DEFAULT_TRAIN_FRACTION, seed: int = 0
) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Deterministic stratified split; floor(fraction*n) per class to train.

    Detection datasets form a single stratum.  Any stratum with fewer than
    2 samples cannot be split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError(f"train fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(np.uint64(seed))
    if ds.task_kind is TaskKind.CLASSIFICATION:
        strata = {cls: [i for i, s in enumerate(ds.samples) if s.label == cls]
                  for cls in ds.request.label_classes}
    else:
        strata = {"all": list(range(len(ds.samples)))}
    train_idx: list[int] = []
    val_idx: list[int] = []
    for name, indices in sorted(strata.items()):
        if len(indices) < 2:
            raise UnsplittableClassError(
                f"class {name!r} has {len(indices)} sample(s); need at least 2 to split"
            )
        order = rng.permutation(len(indices))
        cut = int(np.floor(train_fraction * len(indices)))
        train_idx.extend(indices[i] for i in order[:cut])
        val_idx.extend(indices[i] for i in order[cut:])
    train_idx.sort()
    val_idx.sort()
    return (
        SyntheticDataset(ds.request, [ds.samples[i] for i in train_idx], ds.seed),
        SyntheticDataset(ds.request, [ds.samples[i] for i in val_idx], ds.seed),
    )


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    if len(predictions) != len(labels):
        raise InvalidArgumentError(
            f"{len(predictions)} predictions vs {len(labels)} labels"
        )
    if not labels:
        raise InvalidArgumentError("accuracy of an empty set is undefined")
    return sum(p == y for p, y in zip(predictions, labels)) / len(labels)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.as_xyxy()
    bx0, by0, bx1, by1 = b.as_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # clamp the float-arithmetic overshoot on (near-)identical boxes
    return min(max(inter / (a.area + b.area - inter), 0.0), 1.0)


def _average_precision(matches: list[tuple[float, bool]], n_ground_truth: int) -> float:
    """All-points interpolated AP from (confidence, is_true_positive) pairs."""
    if n_ground_truth == 0:
        return 0.0
    if not matches:
        return 0.0
    tp = np.array([1 if hit else 0 for _, hit in matches], dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    recall = cum_tp / n_ground_truth
    precision = cum_tp / (cum_tp + cum_fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def map50(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[DetectionLabel],
    iou_threshold: float = 0.5,
) -> float:
    """Mean average precision over the classes present in the ground truth.

    Detections are sorted class-wise by descending confidence (stable on
    ties) and matched greedily: each takes the not-yet-matched ground-truth
    box of highest IoU at or above the threshold.
    """
    if len(detections) != len(ground_truth):
        raise InvalidArgumentError(
            f"{len(detections)} detection lists vs {len(ground_truth)} ground-truth lists"
        )
    classes = sorted({cid for per_image in ground_truth for cid, _ in per_image})
    if not classes:
        raise UndefinedMetricError("ground truth contains no boxes; mAP is undefined")

    aps = []
    for cls in classes:
        gt_boxes = [[box for cid, box in per_image if cid == cls] for per_image in ground_truth]
        n_gt = sum(len(boxes) for boxes in gt_boxes)
        flat = [
            (img_idx, det)
            for img_idx, per_image in enumerate(detections)
            for det in per_image
            if det.class_id == cls
        ]
        flat.sort(key=lambda pair: -pair[1].confidence)
        taken = [set() for _ in ground_truth]
        matches: list[tuple[float, bool]] = []
        for img_idx, det in flat:
            best_iou, best_j = 0.0, -1
            for j, box in enumerate(gt_boxes[img_idx]):
                if j in taken[img_idx]:
                    continue
                value = iou(det.bbox, box)
                if value > best_iou:
                    best_iou, best_j = value, j
            if best_j >= 0 and best_iou >= iou_threshold:
                taken[img_idx].add(best_j)
                matches.append((det.confidence, True))
            else:
                matches.append((det.confidence, False))
        aps.append(_average_precision(matches, n_gt))
    return float(np.mean(aps))


def dataset_labels(ds: SyntheticDataset) -> list:
    return [s.label for s in ds.samples]


def train_and_evaluate(
    train_set: SyntheticDataset,
    validation_set: SyntheticDataset,
    test_set: SyntheticDataset,
    backend,
    config: dict | None = None,
) -> tuple[UtilityReport, object]:
    """Run a training job and score the returned model on the test set.

    The backend trains and reports per-epoch validation scores plus the
    best-validation-epoch model; the test metric is computed locally.
    Returns the report and the raw train result (which may carry weights).
    """
    from .backends import CLASSIFIER_TRAIN_DEFAULTS, DETECTOR_TRAIN_DEFAULTS

    task = train_set.task_kind
    if config is None:
        config = dict(
            CLASSIFIER_TRAIN_DEFAULTS if task is TaskKind.CLASSIFICATION else DETECTOR_TRAIN_DEFAULTS
        )
    try:
        result = backend.train(train_set, validation_set, config)
        images = [s.image for s in test_set.samples]
        if task is TaskKind.CLASSIFICATION:
            predictions = [p for p, _ in backend.predict_classes(result.model_ref, images)]
            value = accuracy(predictions, dataset_labels(test_set))
            metric = "accuracy"
        else:
            predictions = backend.predict_detections(result.model_ref, images)
            value = map50(predictions, dataset_labels(test_set))
            metric = "mAP50"
    except (InvalidArgumentError, UndefinedMetricError, TrainingFailedError):
        raise
    except Exception as exc:
        raise TrainingFailedError(f"training backend failed: {exc}") from exc
    report = UtilityReport(
        metric=metric,
        value=value,
        split=f"train={len(train_set)} val={len(validation_set)} test={len(test_set)}",
        provenance={
            "model_ref": result.model_ref,
            "epoch_scores": result.epoch_scores,
            "config": config,
        },
    )
    return report, result


def run_utility(
    train_set: SyntheticDataset,
    validation_set: SyntheticDataset,
    test_set: SyntheticDataset,
    backend,
    config: dict | None = None,
) -> UtilityReport:
    """Train through the backend and report the test metric of the
    best-validation-epoch model (metric computed locally)."""
    report, _ = train_and_evaluate(train_set, validation_set, test_set, backend, config)
    return report
