import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanigen import utility
from sanigen.dataset import BBox, Detection, Provenance, SyntheticDataset, SyntheticSample
from sanigen.errors import (
    InvalidArgumentError,
    TrainingFailedError,
    UndefinedMetricError,
    UnsplittableClassError,
)
from sanigen.mock_backend import MockBackend
from sanigen.sanitizer import TaskKind, UserRequest


def classification_dataset(counts: dict[str, int], seed=0) -> SyntheticDataset:
    classes = tuple(counts)
    request = UserRequest(("thing",), "bench", "x", classes, TaskKind.CLASSIFICATION)
    rng = np.random.default_rng(seed)
    samples = []
    for label, n in counts.items():
        for _ in range(n):
            img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
            samples.append(SyntheticSample(img, label, Provenance("", "", "", 0)))
    return SyntheticDataset(request, samples, seed)


def separable_dataset(n_per_class=8, seed=0):
    """Two classes with far-apart constant palettes; trivially separable."""
    request = UserRequest(
        ("thing",), "bench", "x", ("bright", "dark"), TaskKind.CLASSIFICATION
    )
    rng = np.random.default_rng(seed)
    samples = []
    for label, base in (("bright", 210), ("dark", 40)):
        for _ in range(n_per_class):
            img = np.clip(base + rng.normal(0, 8, (16, 16, 3)), 0, 255).astype(np.uint8)
            samples.append(SyntheticSample(img, label, Provenance("", "", "", 0)))
    return SyntheticDataset(request, samples, seed)


class TestSplitDataset:
    def test_stratified_counts(self):
        ds = classification_dataset({"a": 10, "b": 10})
        train, val = utility.split_dataset(ds, 0.8, seed=1)
        assert len(train) == 16 and len(val) == 4
        assert dict(train.class_counts()) == {"a": 8, "b": 8}

    def test_two_per_class_half_split(self):
        ds = classification_dataset({"a": 2, "b": 2})
        train, val = utility.split_dataset(ds, 0.5, seed=0)
        assert dict(train.class_counts()) == {"a": 1, "b": 1}
        assert dict(val.class_counts()) == {"a": 1, "b": 1}

    def test_deterministic(self):
        ds = classification_dataset({"a": 9, "b": 7}, seed=3)
        first = utility.split_dataset(ds, 0.8, seed=42)
        second = utility.split_dataset(ds, 0.8, seed=42)
        for a, b in zip(first[0].samples, second[0].samples):
            assert np.array_equal(a.image, b.image)

    def test_partition_properties(self):
        ds = classification_dataset({"a": 11, "b": 5}, seed=2)
        train, val = utility.split_dataset(ds, 0.7, seed=9)
        ids = lambda d: {id(s) for s in d.samples}  # noqa: E731
        assert ids(train) | ids(val) == ids(ds)
        assert not (ids(train) & ids(val))

    def test_unsplittable_class(self):
        ds = classification_dataset({"a": 5, "b": 1})
        with pytest.raises(UnsplittableClassError):
            utility.split_dataset(ds, 0.8, seed=0)

    def test_fraction_bounds(self):
        ds = classification_dataset({"a": 4, "b": 4})
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(InvalidArgumentError):
                utility.split_dataset(ds, bad, seed=0)


class TestAccuracy:
    def test_all_correct(self):
        assert utility.accuracy(["a", "b"], ["a", "b"]) == 1.0

    def test_all_wrong(self):
        assert utility.accuracy(["a", "a"], ["b", "b"]) == 0.0

    def test_three_of_four(self):
        assert utility.accuracy(["a", "b", "a", "a"], ["a", "b", "a", "b"]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            utility.accuracy(["a"], ["a", "b"])


class TestIoU:
    def test_identical(self):
        box = BBox(3, 4, 10, 12)
        assert utility.iou(box, box) == 1.0

    def test_disjoint(self):
        assert utility.iou(BBox(0, 0, 5, 5), BBox(10, 10, 2, 2)) == 0.0

    def test_half_overlap_thirds(self):
        # intersection 50, union 150
        assert utility.iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)) == pytest.approx(1 / 3)

    @given(
        st.tuples(*[st.floats(0, 50) for _ in range(2)], *[st.floats(1, 30) for _ in range(2)]),
        st.tuples(*[st.floats(0, 50) for _ in range(2)], *[st.floats(1, 30) for _ in range(2)]),
    )
    @settings(max_examples=100)
    def test_symmetry_range_identity(self, a, b):
        box_a, box_b = BBox(*a), BBox(*b)
        v = utility.iou(box_a, box_b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(utility.iou(box_b, box_a), abs=1e-12)
        if box_a == box_b:
            assert v == pytest.approx(1.0)


def map50_reference(detections, ground_truth, iou_threshold=0.5):
    """Independent brute-force PR implementation (explicit loops, suffix-max
    envelope, recall-delta integration)."""
    classes = sorted({cid for per in ground_truth for cid, _ in per})
    aps = []
    for cls in classes:
        n_gt = sum(1 for per in ground_truth for cid, _ in per if cid == cls)
        flat = []
        for img_idx, per in enumerate(detections):
            for order, det in enumerate(per):
                if det.class_id == cls:
                    flat.append((img_idx, order, det))
        flat.sort(key=lambda t: (-t[2].confidence, t[0], t[1]))
        used = set()
        points = []
        tp = 0
        for rank, (img_idx, _, det) in enumerate(flat, start=1):
            best, best_key = 0.0, None
            for j, (cid, box) in enumerate(ground_truth[img_idx]):
                if cid != cls or (img_idx, j) in used:
                    continue
                value = utility.iou(det.bbox, box)
                if value > best:
                    best, best_key = value, (img_idx, j)
            if best_key is not None and best >= iou_threshold:
                used.add(best_key)
                tp += 1
            points.append((tp / n_gt if n_gt else 0.0, tp / rank))
        ap = 0.0
        prev_recall = 0.0
        for i, (recall, _) in enumerate(points):
            envelope = max((p for r, p in points[i:]), default=0.0)
            ap += (recall - prev_recall) * envelope
            prev_recall = recall
        aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


def random_instance(rng):
    n_classes = int(rng.integers(1, 4))
    n_images = int(rng.integers(1, 3))
    ground_truth = []
    detections = []
    for _ in range(n_images):
        gt = []
        for _ in range(int(rng.integers(0, 4))):
            gt.append(
                (int(rng.integers(0, n_classes)),
                 BBox(*rng.uniform(0, 30, 2), *rng.uniform(2, 20, 2)))
            )
        dets = []
        for _ in range(int(rng.integers(0, 4))):
            dets.append(
                Detection(
                    BBox(*rng.uniform(0, 30, 2), *rng.uniform(2, 20, 2)),
                    int(rng.integers(0, n_classes)),
                    round(float(rng.uniform(0.05, 1.0)), 3),
                )
            )
        ground_truth.append(gt)
        detections.append(dets)
    return detections, ground_truth


class TestMap50:
    def test_perfect_detections(self):
        gt = [[(0, BBox(0, 0, 10, 10))], [(0, BBox(5, 5, 8, 8))]]
        dets = [
            [Detection(BBox(0, 0, 10, 10), 0, 1.0)],
            [Detection(BBox(5, 5, 8, 8), 0, 1.0)],
        ]
        assert utility.map50(dets, gt) == 1.0

    def test_no_detections(self):
        gt = [[(0, BBox(0, 0, 10, 10))]]
        assert utility.map50([[]], gt) == 0.0

    def test_worked_example_five_sixths(self):
        """hit @0.9, miss @0.8, hit @0.7 over two ground-truth boxes."""
        gt = [[(0, BBox(0, 0, 10, 10)), (0, BBox(30, 30, 10, 10))]]
        dets = [[
            Detection(BBox(0, 0, 10, 10), 0, 0.9),
            Detection(BBox(60, 60, 5, 5), 0, 0.8),
            Detection(BBox(30, 30, 10, 10), 0, 0.7),
        ]]
        assert utility.map50(dets, gt) == pytest.approx(5 / 6, abs=1e-12)

    def test_empty_ground_truth_undefined(self):
        with pytest.raises(UndefinedMetricError):
            utility.map50([[]], [[]])

    def test_duplicate_of_matched_gt_never_helps(self):
        gt = [[(0, BBox(0, 0, 10, 10)), (0, BBox(30, 30, 10, 10))]]
        dets = [[
            Detection(BBox(0, 0, 10, 10), 0, 0.9),
            Detection(BBox(30, 30, 10, 10), 0, 0.7),
        ]]
        base = utility.map50(dets, gt)
        with_dup = [[*dets[0], Detection(BBox(0, 0, 10, 10), 0, 0.5)]]
        assert utility.map50(with_dup, gt) <= base + 1e-12

    def test_image_permutation_invariance(self):
        rng = np.random.default_rng(11)
        dets, gt = random_instance(rng)
        while len(gt) < 2 or not any(gt):
            dets, gt = random_instance(rng)
        base = utility.map50(dets, gt) if any(gt) else None
        perm = list(reversed(range(len(gt))))
        assert utility.map50([dets[i] for i in perm], [gt[i] for i in perm]) == base

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(99)
        checked = 0
        while checked < 200:
            dets, gt = random_instance(rng)
            if not any(gt):
                continue
            checked += 1
            assert utility.map50(dets, gt) == pytest.approx(
                map50_reference(dets, gt), abs=1e-9
            )


class TestRunUtility:
    def test_separable_corpus_perfect_accuracy(self):
        ds = separable_dataset()
        train, val = utility.split_dataset(ds, 0.75, seed=4)
        report = utility.run_utility(train, val, val, MockBackend())
        assert report.metric == "accuracy"
        assert report.value == 1.0
        assert len(report.provenance["epoch_scores"]) == 5

    def test_zero_epoch_uses_initial_model(self):
        ds = separable_dataset()
        train, val = utility.split_dataset(ds, 0.75, seed=4)
        report = utility.run_utility(train, val, val, MockBackend(), {"epochs": 0})
        assert report.provenance["epoch_scores"] == []
        assert 0.0 <= report.value <= 1.0

    def test_backend_failure_is_training_failed(self):
        class Broken(MockBackend):
            def train(self, train_set, validation_set, config):
                raise RuntimeError("gpu caught fire")

        ds = separable_dataset()
        train, val = utility.split_dataset(ds, 0.75, seed=4)
        with pytest.raises(TrainingFailedError):
            utility.run_utility(train, val, val, Broken())
