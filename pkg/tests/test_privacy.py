import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sanigen import privacy
from sanigen.errors import (
    DegenerateReferenceError,
    DimensionMismatchError,
    IncompatibleEmbeddingsError,
    InvalidArgumentError,
)
from sanigen.privacy import EmbeddingVector, ReferenceSet
from sanigen.sanitizer import SegmentRole, build_bundle, split_corpus
from tests.conftest import make_corpus, preference


def mi_reference(a: np.ndarray, b: np.ndarray) -> float:
    """Brute-force joint-count oracle: explicit pair counting, fsum reduce."""
    n = a.size
    pairs = Counter(zip(a.ravel().tolist(), b.ravel().tolist()))
    ca = Counter(a.ravel().tolist())
    cb = Counter(b.ravel().tolist())
    terms = []
    for (u, v), c in pairs.items():
        pxy = c / n
        terms.append(pxy * math.log2(pxy / ((ca[u] / n) * (cb[v] / n))))
    return math.fsum(terms)


def entropy_reference(a: np.ndarray) -> float:
    n = a.size
    return -math.fsum(c / n * math.log2(c / n) for c in Counter(a.ravel().tolist()).values())


gray_images = hnp.arrays(np.uint8, st.tuples(st.integers(2, 10), st.integers(2, 10)))


class TestEntropy:
    def test_constant_image(self):
        assert privacy.entropy_bits(np.full((8, 8), 7, np.uint8)) == 0.0

    def test_two_equal_bins(self):
        img = np.zeros((4, 4), np.uint8)
        img[:2] = 255
        assert privacy.entropy_bits(img) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_ramp(self):
        img = np.arange(256, dtype=np.uint8).reshape(256, 1)
        assert privacy.entropy_bits(img) == pytest.approx(8.0, abs=1e-12)


class TestImageMI:
    def test_constant_partner_gives_zero(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 256, (8, 8), dtype=np.uint8)
        assert privacy.image_mi_bits(x, np.full((8, 8), 9, np.uint8)) == 0.0

    def test_two_level_self_mi(self):
        x = np.array([[0, 0], [255, 255]], np.uint8)
        assert privacy.image_mi_bits(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_self_ratio_is_one(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 256, (12, 12), dtype=np.uint8)
        assert privacy.image_mi_bits(x, x) / privacy.entropy_bits(x) == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            privacy.image_mi_bits(np.zeros((2, 2), np.uint8), np.zeros((3, 3), np.uint8))

    @given(st.data())
    @settings(max_examples=60)
    def test_symmetry_and_bounds(self, data):
        a = data.draw(gray_images)
        b = data.draw(hnp.arrays(np.uint8, a.shape))
        ab = privacy.image_mi_bits(a, b)
        assert ab == pytest.approx(privacy.image_mi_bits(b, a), abs=1e-12)
        assert ab >= -1e-12
        assert ab <= min(privacy.entropy_bits(a), privacy.entropy_bits(b)) + 1e-9

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            a = rng.integers(0, 256, (8, 8), dtype=np.uint8)
            b = rng.integers(0, 256, (8, 8), dtype=np.uint8)
            assert abs(privacy.image_mi_bits(a, b) - mi_reference(a, b)) <= 1e-12


class TestNormalizedMI:
    def test_all_l0_is_exact_zero(self, husky_request, small_corpus):
        images, manifest = small_corpus
        refs = ReferenceSet(split_corpus(images, manifest, husky_request))
        bundle = build_bundle(husky_request, images, manifest, preference("L0", "L0"))
        for role in husky_request.roles:
            assert privacy.normalized_mi(refs, bundle, role) == 0.0

    def test_identical_rendering_is_one(self, husky_request, small_corpus):
        images, manifest = small_corpus
        refs = ReferenceSet(split_corpus(images, manifest, husky_request))
        bundle = build_bundle(husky_request, images, manifest, preference("L2", "L0"))
        terms = privacy.normalized_mi_terms(refs, bundle, SegmentRole.target(0))
        for term in terms:
            assert term == pytest.approx(1.0, abs=1e-9)

    def test_matches_equation_oracle_on_tiny_corpus(self, husky_request):
        """Hand Eq. over N=2 synthetic 4x4 images with raw target, text background."""
        from sanigen.sanitizer import ManifestImage, SegmentationManifest

        rng = np.random.default_rng(5)
        images = []
        manifest_entries = []
        for i in range(2):
            img = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
            mask = np.zeros((4, 4), bool)
            mask[1:3, 1:3] = True
            images.append((f"i{i}", img))
            manifest_entries.append(ManifestImage(f"i{i}", {0: mask}, {0: 1.0}))
        manifest = SegmentationManifest(manifest_entries)
        refs = ReferenceSet(split_corpus(images, manifest, husky_request))
        bundle = build_bundle(husky_request, images, manifest, preference("L2", "L0"))

        expected_terms = []
        for i in range(2):
            raw = privacy.imaging.to_grayscale(refs.canvas(i, SegmentRole.target(0)))
            rendered = privacy.imaging.to_grayscale(bundle.render(i))
            expected_terms.append(mi_reference(raw, rendered) / entropy_reference(raw))
        expected = sum(expected_terms) / 2
        actual = privacy.normalized_mi(refs, bundle, SegmentRole.target(0))
        assert actual == pytest.approx(expected, abs=1e-12)

    def test_degenerate_reference_rejected(self, husky_request):
        from sanigen.sanitizer import ManifestImage, SegmentationManifest

        img = np.zeros((8, 8, 3), np.uint8)
        mask = np.zeros((8, 8), bool)
        mask[2:6, 2:6] = True
        manifest = SegmentationManifest([ManifestImage("i0", {0: mask}, {})])
        refs = ReferenceSet(split_corpus([("i0", img)], manifest, husky_request))
        bundle = build_bundle(husky_request, [("i0", img)], manifest, preference("L2", "L0"))
        with pytest.raises(DegenerateReferenceError):
            privacy.normalized_mi(refs, bundle, SegmentRole.target(0))

    def test_level_monotonicity_on_corpus(self, husky_request):
        images, manifest = make_corpus(n=8, size=96, seed=3)
        refs = ReferenceSet(split_corpus(images, manifest, husky_request))
        target = SegmentRole.target(0)
        values = {}
        for name, pref in (("L0", preference("L0", "L0")),
                           ("L1", preference("L1", "L0")),
                           ("L2", preference("L2", "L0"))):
            bundle = build_bundle(husky_request, images, manifest, pref, seed=2)
            values[name] = privacy.normalized_mi(refs, bundle, target)
        assert values["L0"] <= values["L1"] <= values["L2"]
        assert values["L0"] < values["L2"]


def vec(*values, provider="p"):
    return EmbeddingVector(np.array(values, dtype=np.float64), provider)


class TestSim:
    def test_self_unit_vector(self):
        assert privacy.sim([vec(1, 0)], [vec(1, 0)]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert privacy.sim([vec(1, 0)], [vec(0, 1)]) == pytest.approx(0.0)

    def test_cross_pair_mean(self):
        # cosines 1 and 0, hand-computed
        assert privacy.sim([vec(1, 0), vec(0, 1)], [vec(1, 0)]) == pytest.approx(0.5)

    def test_matched_pairs_mode(self):
        value = privacy.sim([vec(1, 0), vec(0, 1)], [vec(1, 0), vec(0, 1)], matched_pairs=True)
        assert value == pytest.approx(1.0)
        with pytest.raises(InvalidArgumentError):
            privacy.sim([vec(1, 0)], [vec(1, 0), vec(0, 1)], matched_pairs=True)

    def test_scale_invariance_and_symmetry(self):
        P = [vec(1, 2, 3), vec(-1, 0.5, 2)]
        Q = [vec(0.3, -2, 1)]
        scaled = [EmbeddingVector(7.5 * p.values, "p") for p in P]
        assert privacy.sim(P, Q) == pytest.approx(privacy.sim(scaled, Q), abs=1e-12)
        assert privacy.sim(P, Q) == pytest.approx(privacy.sim(Q, P), abs=1e-12)

    def test_provider_mismatch(self):
        with pytest.raises(IncompatibleEmbeddingsError):
            privacy.sim([vec(1, 0)], [vec(1, 0, provider="other")])

    def test_dimension_mismatch(self):
        with pytest.raises(IncompatibleEmbeddingsError):
            privacy.sim([vec(1, 0)], [vec(1, 0, 0)])

    def test_zero_vector_rejected(self):
        with pytest.raises(InvalidArgumentError):
            privacy.sim([vec(0, 0)], [vec(1, 0)])


class TestPromptSim:
    def test_prompt_equal_to_baseline(self):
        p = vec(0.6, 0.8)
        images = [vec(1, 0), vec(0, 1)]
        value, baseline = privacy.prompt_sim(p, images, p)
        assert value == baseline

    def test_hand_computed_mean(self):
        value, baseline = privacy.prompt_sim(
            vec(1, 0), [vec(1, 0), vec(0, 1)], vec(0, 1)
        )
        assert value == pytest.approx(0.5)
        assert baseline == pytest.approx(0.5)


class TestPrivacyReport:
    def test_all_l0_report(self, husky_request, small_corpus):
        images, manifest = small_corpus
        refs = ReferenceSet(split_corpus(images, manifest, husky_request))
        bundle = build_bundle(husky_request, images, manifest, preference("L0", "L0"))
        synthetic = [vec(1, 1), vec(1, 0)]
        private = [vec(1, 0.5)]
        report = privacy.privacy_report(
            refs,
            bundle,
            {SegmentRole.target(0): private},
            {SegmentRole.target(0): synthetic},
            (vec(1, 0), private, vec(0, 1)),
        )
        for row in report.roles:
            assert row.mi == 0.0
        target_row = report.for_role(SegmentRole.target(0))
        assert target_row.sim == pytest.approx(privacy.sim(private, synthetic))
        assert report.prompt is not None
        assert report.preference == "t=L0,b=L0"
