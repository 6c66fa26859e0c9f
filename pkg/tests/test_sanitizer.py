import numpy as np
import pytest

from sanigen import imaging
from sanigen.errors import (
    BackendUnavailableError,
    DimensionMismatchError,
    IncompleteSegmentationError,
    InvalidArgumentError,
)
from sanigen.imaging import NoiseParams
from sanigen.sanitizer import (
    FeatureKind,
    Level,
    ManifestImage,
    SanitizationLevel,
    SegmentationManifest,
    SegmentRole,
    TaskKind,
    UserRequest,
    build_bundle,
    parse_level,
    parse_preference,
    render_bundle_canvas,
    sanitize_segment,
    split_segments,
)
from tests.conftest import blob_mask, natural_image, preference


class TestRequestValidation:
    def test_classification_needs_two_classes(self):
        with pytest.raises(InvalidArgumentError):
            UserRequest(("dog",), "room", "x", ("only",), TaskKind.CLASSIFICATION)

    def test_detection_allows_empty_classes(self):
        req = UserRequest(("bottle",), "room", "x", (), TaskKind.DETECTION)
        assert req.label_classes == ()

    def test_empty_descriptions_rejected(self):
        with pytest.raises(InvalidArgumentError):
            UserRequest(("",), "room", "x", (), TaskKind.DETECTION)
        with pytest.raises(InvalidArgumentError):
            UserRequest(("dog",), " ", "x", (), TaskKind.DETECTION)


class TestRoles:
    def test_keys_single_target(self):
        assert SegmentRole.target(0).key(1) == "t"
        assert SegmentRole.background().key(1) == "b"

    def test_keys_multi_target(self):
        assert SegmentRole.target(0).key(2) == "t1"
        assert SegmentRole.target(1).key(2) == "t2"

    @pytest.mark.parametrize("key,role", [
        ("t", SegmentRole.target(0)),
        ("t1", SegmentRole.target(0)),
        ("t3", SegmentRole.target(2)),
        ("b", SegmentRole.background()),
    ])
    def test_parse(self, key, role):
        assert SegmentRole.parse(key) == role

    def test_parse_rejects_garbage(self):
        for bad in ("x", "t0", "tt", ""):
            with pytest.raises(InvalidArgumentError):
                SegmentRole.parse(bad)


class TestLevels:
    def test_feature_kind_iff_l1(self):
        with pytest.raises(InvalidArgumentError):
            SanitizationLevel(Level.L1)
        with pytest.raises(InvalidArgumentError):
            SanitizationLevel(Level.L0, FeatureKind.CANNY)
        assert SanitizationLevel(Level.L1, FeatureKind.POSE).payload_kind == "feature"

    def test_parse_level_spellings(self):
        assert parse_level("L0") == SanitizationLevel(Level.L0)
        assert parse_level("L1") == SanitizationLevel(Level.L1, FeatureKind.CANNY)
        assert parse_level("L1:pose") == SanitizationLevel(Level.L1, FeatureKind.POSE)
        noisy = parse_level("L2+noise7.5")
        assert noisy.level is Level.L2 and noisy.noise == NoiseParams(7.5, 0)

    def test_parse_preference_totality(self, husky_request):
        pref = parse_preference("t=L2,b=L0", husky_request)
        assert pref.for_role(SegmentRole.target(0)).level is Level.L2
        with pytest.raises(InvalidArgumentError):
            parse_preference("t=L2", husky_request)
        with pytest.raises(InvalidArgumentError):
            parse_preference("t=L2,b=L0,t2=L1", husky_request)

    def test_preference_spelling_round_trip(self, husky_request):
        pref = parse_preference("t=L1:canny,b=L2+noise5", husky_request)
        assert pref.spell(husky_request) == "t=L1:canny,b=L2+noise5"


class TestSplitSegments:
    def test_full_target_mask(self, husky_request):
        img = natural_image(1)
        entry = ManifestImage("a", {0: np.ones((64, 64), bool)}, {0: 1.0})
        segs = dict(split_segments(img, entry, husky_request))
        assert np.array_equal(segs[SegmentRole.target(0)], img)
        assert segs[SegmentRole.background()].sum() == 0

    def test_empty_target_mask(self, husky_request):
        img = natural_image(2)
        entry = ManifestImage("a", {0: np.zeros((64, 64), bool)}, {0: 1.0})
        segs = dict(split_segments(img, entry, husky_request))
        assert segs[SegmentRole.target(0)].sum() == 0
        assert np.array_equal(segs[SegmentRole.background()], img)

    def test_role_canvases_recompose(self, husky_request):
        img = natural_image(3)
        mask = blob_mask(3)
        entry = ManifestImage("a", {0: mask}, {0: 0.8})
        segs = dict(split_segments(img, entry, husky_request))
        rebuilt = imaging.composite(
            segs[SegmentRole.target(0)], mask, segs[SegmentRole.background()]
        )
        assert np.array_equal(rebuilt, img)

    def test_missing_target_mask(self, husky_request):
        img = natural_image(4)
        with pytest.raises(IncompleteSegmentationError) as info:
            split_segments(img, ManifestImage("a", {}, {}), husky_request)
        assert info.value.role == SegmentRole.target(0)

    def test_manifest_index_out_of_range(self, husky_request):
        img = natural_image(5)
        entry = ManifestImage("a", {0: blob_mask(5), 4: blob_mask(6)}, {})
        with pytest.raises(InvalidArgumentError):
            split_segments(img, entry, husky_request)


class TestSanitizeSegment:
    def test_l0_is_text_only(self, husky_request):
        seg = sanitize_segment(
            SegmentRole.target(0), natural_image(1), parse_level("L0"), husky_request
        )
        assert seg.text == "dog" and seg.payload is None

    def test_l1_canny_of_constant_segment_is_zero(self, husky_request):
        seg = sanitize_segment(
            SegmentRole.background(),
            np.full((32, 32, 3), 60, np.uint8),
            parse_level("L1"),
            husky_request,
        )
        assert seg.text == "bedroom"
        assert seg.payload.sum() == 0

    def test_l2_noiseless_passthrough(self, husky_request):
        canvas = imaging.apply_mask(natural_image(2), blob_mask(2))
        seg = sanitize_segment(
            SegmentRole.target(0),
            canvas,
            SanitizationLevel(Level.L2, None, NoiseParams(0, 3)),
            husky_request,
        )
        assert np.array_equal(seg.payload, canvas)

    def test_pose_requires_extractor(self, husky_request):
        with pytest.raises(BackendUnavailableError):
            sanitize_segment(
                SegmentRole.target(0), natural_image(3), parse_level("L1:pose"), husky_request
            )

    def test_pose_extractor_used(self, husky_request):
        marker = np.full((64, 64), 9, np.uint8)
        seg = sanitize_segment(
            SegmentRole.target(0),
            natural_image(3),
            parse_level("L1:pose"),
            husky_request,
            feature_extractors={FeatureKind.POSE: lambda canvas, mask: marker},
        )
        assert np.array_equal(seg.payload, marker)


class TestBuildBundle:
    def test_all_l0_has_no_payloads(self, husky_request, small_corpus):
        images, manifest = small_corpus
        bundle = build_bundle(husky_request, images, manifest, preference("L0", "L0"))
        segments = [s for e in bundle.images for s in e.segments]
        assert len(segments) == 10
        assert all(s.payload is None for s in segments)

    def test_raw_target_text_background(self, husky_request, small_corpus):
        images, manifest = small_corpus
        bundle = build_bundle(husky_request, images, manifest, preference("L2", "L0"))
        for (name, img), entry in zip(images, bundle.images):
            by_role = {s.role: s for s in entry.segments}
            target = by_role[SegmentRole.target(0)]
            mask = manifest.entry_for(name).target_masks[0]
            assert np.array_equal(target.payload, imaging.apply_mask(img, mask))
            background = by_role[SegmentRole.background()]
            assert background.payload is None and background.text == "bedroom"

    def test_three_role_mixed_preference(self):
        request = UserRequest(
            ("pill bottle", "photo frame"), "bedroom", "detect the bottle", (),
            TaskKind.DETECTION,
        )
        images = [(f"i{i}.png", natural_image(i, 48)) for i in range(2)]
        half = np.zeros((48, 48), bool)
        half[:, :20] = True
        other = np.zeros((48, 48), bool)
        other[:, 28:] = True
        manifest = SegmentationManifest(
            [ManifestImage(n, {0: half, 1: other}, {0: 0.9, 1: 0.8}) for n, _ in images]
        )
        pref = parse_preference("t1=L0,t2=L1,b=L2", request)
        bundle = build_bundle(request, images, manifest, pref)
        for entry in bundle.images:
            by_role = {s.role: s for s in entry.segments}
            assert by_role[SegmentRole.target(0)].payload is None
            assert by_role[SegmentRole.target(1)].payload_kind == "feature"
            assert by_role[SegmentRole.background()].payload_kind == "raw"

    def test_deterministic(self, husky_request, small_corpus):
        images, manifest = small_corpus
        pref = preference("L2+noise5", "L0")
        a = build_bundle(husky_request, images, manifest, pref, seed=9)
        b = build_bundle(husky_request, images, manifest, pref, seed=9)
        for ea, eb in zip(a.images, b.images):
            for sa, sb in zip(ea.segments, eb.segments):
                assert (sa.payload is None) == (sb.payload is None)
                if sa.payload is not None:
                    assert np.array_equal(sa.payload, sb.payload)

    def test_no_cross_role_leakage(self, husky_request, small_corpus):
        """Pixels outside a role's mask never change that role's payload."""
        images, manifest = small_corpus
        pref = preference("L2", "L0")
        name, img = images[0]
        mask = manifest.entry_for(name).target_masks[0]
        tampered = img.copy()
        tampered[~mask] = 255 - tampered[~mask]
        bundle_a = build_bundle(husky_request, [(name, img)],
                                SegmentationManifest([manifest.images[0]]), pref)
        bundle_b = build_bundle(husky_request, [(name, tampered)],
                                SegmentationManifest([manifest.images[0]]), pref)
        pa = bundle_a.images[0].segments[0].payload
        pb = bundle_b.images[0].segments[0].payload
        assert np.array_equal(pa, pb)

    def test_mismatched_sizes_rejected(self, husky_request):
        images = [("a.png", natural_image(0, 64)), ("b.png", natural_image(1, 32))]
        manifest = SegmentationManifest(
            [
                ManifestImage("a.png", {0: blob_mask(0, 64)}, {}),
                ManifestImage("b.png", {0: blob_mask(1, 32)}, {}),
            ]
        )
        with pytest.raises(DimensionMismatchError) as info:
            build_bundle(husky_request, images, manifest, preference("L0", "L0"))
        assert "b.png" in str(info.value)

    def test_text_fields_verbatim(self, husky_request, small_corpus):
        images, manifest = small_corpus
        bundle = build_bundle(husky_request, images, manifest, preference("L1", "L2"))
        for entry in bundle.images:
            for seg in entry.segments:
                assert seg.text == husky_request.text_for(seg.role)


class TestRenderBundleCanvas:
    def test_all_l0_renders_zero(self, husky_request, small_corpus):
        images, manifest = small_corpus
        bundle = build_bundle(husky_request, images, manifest, preference("L0", "L0"))
        assert bundle.render(0).sum() == 0

    def test_single_l2_segment_is_its_payload(self, husky_request, small_corpus):
        images, manifest = small_corpus
        bundle = build_bundle(husky_request, images, manifest, preference("L2", "L0"))
        target = bundle.images[0].segments[0]
        assert np.array_equal(bundle.render(0), target.payload)

    def test_l2_l2_reconstructs_original(self, husky_request, small_corpus):
        images, manifest = small_corpus
        bundle = build_bundle(husky_request, images, manifest, preference("L2", "L2"))
        for i, (name, img) in enumerate(images):
            assert np.array_equal(bundle.render(i), img)

    def test_needs_dims_when_payload_free(self):
        with pytest.raises(InvalidArgumentError):
            render_bundle_canvas([])
