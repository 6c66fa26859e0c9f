"""Hand-crafted joint embedding space.

Images map to a color/gradient descriptor (HSV histograms, a global
gradient-orientation histogram, channel moments, foreground area); text
maps into the same dimensionality through a fixed random projection of
hashed character trigrams.  Both are deterministic, unit-normalized and
share one provider id, which is what the prompt-leakage measurement needs.
"""

from __future__ import annotations

import hashlib

import cv2
import numpy as np

from ..raster import as_mask, as_rgb

DIMENSION = 47
_HASH_BUCKETS = 256


class DescriptorEmbedder:
    def __init__(self, model_id: str):
        self.model_id = model_id
        projection_rng = np.random.default_rng(0x5EED)
        self._projection = projection_rng.normal(
            0.0, 1.0, size=(DIMENSION, _HASH_BUCKETS)
        ) / np.sqrt(_HASH_BUCKETS)

    @property
    def provider_id(self) -> str:
        return self.model_id

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        rgb = as_rgb(img)
        fg = as_mask(img)
        if not fg.any():
            fg = np.ones(rgb.shape[:2], dtype=bool)
        hsv = cv2.cvtColor(rgb, cv2.COLOR_RGB2HSV)
        hue = np.bincount((hsv[:, :, 0][fg] // 15).clip(0, 11), minlength=12)[:12]
        sat = np.bincount(hsv[:, :, 1][fg] // 32, minlength=8)[:8]
        val = np.bincount(hsv[:, :, 2][fg] // 32, minlength=8)[:8]
        gray = cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY).astype(np.float64)
        gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0)
        gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1)
        magnitude = np.hypot(gx, gy)[fg]
        orientation = (np.degrees(np.arctan2(gy, gx))[fg] % 180.0 / 15.0).astype(int).clip(0, 11)
        ori_hist = np.bincount(orientation, weights=magnitude, minlength=12)[:12]
        pixels = rgb[fg].astype(np.float64)
        moments = np.concatenate([pixels.mean(axis=0) / 255.0, pixels.std(axis=0) / 128.0])
        parts = [
            hue / max(hue.sum(), 1),
            sat / max(sat.sum(), 1),
            val / max(val.sum(), 1),
            ori_hist / max(ori_hist.sum(), 1e-9),
            moments,
            np.array([fg.mean()]),
        ]
        vector = np.concatenate(parts)
        assert vector.size == DIMENSION
        return vector / np.linalg.norm(vector)

    def embed_text(self, text: str) -> np.ndarray:
        buckets = np.zeros(_HASH_BUCKETS)
        buckets[0] = 1.0  # constant feature keeps the empty prompt well-defined
        padded = f"  {text.lower()} "
        for i in range(len(padded) - 2):
            trigram = padded[i : i + 3]
            digest = hashlib.sha256(trigram.encode()).digest()
            buckets[digest[0]] += 1.0
        vector = self._projection @ buckets
        return vector / np.linalg.norm(vector)
