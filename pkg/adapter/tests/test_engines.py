import numpy as np
import pytest

from modelhost.config import AdapterConfig
from modelhost.engines.embedding import DescriptorEmbedder
from modelhost.engines.generation import SpectralGenerator
from modelhost.engines.segmentation import GrabCutSegmenter
from modelhost.raster import ProtocolError


def reference_images(seed=1, n=3, size=48):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        base = rng.integers(60, 200, 3)
        img = np.clip(base + rng.normal(0, 15, (size, size, 3)), 0, 255).astype(np.uint8)
        out.append(img)
    return out


class TestSpectralGenerator:
    def setup_method(self):
        self.gen = SpectralGenerator("classic-spectral-v1")

    def test_generate_deterministic(self):
        a, alpha_a = self.gen.generate("pretrained", "a dog", 7, True)
        b, alpha_b = self.gen.generate("pretrained", "a dog", 7, True)
        assert np.array_equal(a, b) and np.array_equal(alpha_a, alpha_b)
        c, _ = self.gen.generate("pretrained", "a dog", 8, True)
        assert not np.array_equal(a, c)

    def test_fine_tuned_texture_matches_reference_statistics(self):
        refs = reference_images()
        model_ref = self.gen.fine_tune("t", refs, {})
        tuned, _ = self.gen.generate(model_ref, "a dog", 3, False)
        plain, _ = self.gen.generate("pretrained", "a dog", 3, False)
        ref_mean = np.concatenate([r.reshape(-1, 3) for r in refs]).mean(axis=0)
        tuned_err = np.abs(tuned.reshape(-1, 3).mean(axis=0) - ref_mean).mean()
        plain_err = np.abs(plain.reshape(-1, 3).mean(axis=0) - ref_mean).mean()
        assert tuned_err < plain_err

    def test_unknown_model_raises_protocol_error(self):
        with pytest.raises(ProtocolError):
            self.gen.generate("ft-nope", "a dog", 1, False)

    def test_inpaint_preserves_unmasked_pixels(self):
        canvas = reference_images(seed=5, n=1)[0]
        mask = np.zeros(canvas.shape[:2], bool)
        mask[10:30, 10:30] = True
        out = self.gen.inpaint("pretrained", canvas, mask, "a bedroom", 2)
        assert np.array_equal(out[~mask], canvas[~mask])
        assert not np.array_equal(out[mask], canvas[mask])

    def test_condition_generate_count_and_edge_imprint(self):
        feature = np.zeros((40, 40), np.uint8)
        feature[8:32, 20] = 255
        images = self.gen.condition_generate([feature], "a bottle", 4, 3)
        assert len(images) == 3
        img = images[0].astype(float).mean(axis=2)
        on_edge = img[8:32, 20].mean()
        off_edge = img[8:32, 30].mean()
        assert on_edge < off_edge  # texture darkens along the conditioning edge


class TestDescriptorEmbedder:
    def setup_method(self):
        self.embedder = DescriptorEmbedder("adapter-classic-v1")

    def test_image_embedding_unit_norm(self):
        v = self.embedder.embed_image(reference_images(n=1)[0])
        assert np.linalg.norm(v) == pytest.approx(1.0)

    def test_similar_images_closer_than_dissimilar(self):
        bright = np.full((32, 32, 3), 220, np.uint8)
        bright2 = np.full((32, 32, 3), 210, np.uint8)
        dark = np.full((32, 32, 3), 30, np.uint8)
        e = self.embedder.embed_image
        assert np.dot(e(bright), e(bright2)) > np.dot(e(bright), e(dark))

    def test_empty_text_stable_and_normalized(self):
        a = self.embedder.embed_text("")
        b = self.embedder.embed_text("")
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)

    def test_text_and_image_share_dimension(self):
        t = self.embedder.embed_text("a dog in a bedroom")
        i = self.embedder.embed_image(reference_images(n=1)[0])
        assert t.size == i.size


class TestGrabCutSegmenter:
    def test_masks_match_dims_and_confidences(self):
        rng = np.random.default_rng(3)
        image = rng.integers(0, 255, (48, 64, 3), dtype=np.uint8)
        results = GrabCutSegmenter("grabcut-v1").segment(image, ["cup", "plate"])
        assert len(results) == 2
        for mask, conf in results:
            assert mask.shape == (48, 64) and mask.dtype == np.bool_
            assert 0.0 <= conf <= 1.0
            assert mask.any()

    def test_tiny_image_falls_back(self):
        image = np.zeros((8, 8, 3), np.uint8)
        results = GrabCutSegmenter("grabcut-v1").segment(image, ["dot"])
        assert results[0][0].shape == (8, 8)


class TestConfig:
    def test_env_overrides(self):
        cfg = AdapterConfig.load(env={"MODELHOST_PORT": "9000", "MODELHOST_DEVICE": "cpu"})
        assert cfg.port == 9000 and cfg.device == "cpu"

    def test_every_capability_has_a_model_id(self):
        ids = AdapterConfig().model_ids()
        assert set(ids) == {"generation", "embedding", "segmentation", "training"}
        assert all(ids.values())

    def test_fine_tune_block_defaults(self):
        block = AdapterConfig().fine_tune
        assert block["learning_rate"] == 2e-6
        assert block["max_steps"] == 800
        assert block["gradient_accumulation_steps"] == 2
        assert block["prior_loss_weight"] == 0.01
