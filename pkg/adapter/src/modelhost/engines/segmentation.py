"""GrabCut-based target segmentation.

Each requested target gets a rectangular prior (the canvas interior, split
column-wise when several targets are requested); GrabCut refines it into a
mask.  OpenCV's global RNG is reseeded from the image content per call so
results are reproducible.  Degenerate cuts fall back to the prior ellipse.
"""

from __future__ import annotations

import hashlib

import cv2
import numpy as np

from ..raster import as_rgb


class GrabCutSegmenter:
    def __init__(self, model_id: str, iterations: int = 3):
        self.model_id = model_id
        self.iterations = iterations

    def segment(self, image: np.ndarray, targets: list[str]) -> list[tuple[np.ndarray, float]]:
        rgb = as_rgb(image)
        h, w = rgb.shape[:2]
        n = max(len(targets), 1)
        columns = np.array_split(np.arange(w), n)
        results = []
        for i, description in enumerate(targets):
            cols = columns[i]
            x0 = int(cols[0] + max(1, len(cols) // 10))
            x1 = int(cols[-1] - max(1, len(cols) // 10))
            y0, y1 = max(1, h // 10), h - max(1, h // 10) - 1
            if x1 - x0 < 3 or y1 - y0 < 3 or h < 16 or w < 16:
                results.append((self._ellipse(h, w, cols), 0.5))
                continue
            seed = int.from_bytes(
                hashlib.sha256(rgb.tobytes() + description.encode()).digest()[:4], "big"
            )
            cv2.setRNGSeed(seed & 0x7FFFFFFF)
            mask = np.zeros((h, w), np.uint8)
            bgd = np.zeros((1, 65), np.float64)
            fgd = np.zeros((1, 65), np.float64)
            rect = (x0, y0, x1 - x0, y1 - y0)
            try:
                cv2.grabCut(rgb, mask, rect, bgd, fgd, self.iterations, cv2.GC_INIT_WITH_RECT)
            except cv2.error:
                results.append((self._ellipse(h, w, cols), 0.5))
                continue
            foreground = (mask == cv2.GC_FGD) | (mask == cv2.GC_PR_FGD)
            if not foreground.any():
                results.append((self._ellipse(h, w, cols), 0.5))
                continue
            definite = float((mask == cv2.GC_FGD).sum()) / max(int(foreground.sum()), 1)
            results.append((foreground, round(0.5 + 0.49 * definite, 4)))
        return results

    @staticmethod
    def _ellipse(h: int, w: int, cols: np.ndarray) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        cx = (cols[0] + cols[-1]) / 2.0
        cy = h / 2.0
        rx = max(len(cols) / 3.0, 1.0)
        ry = max(h / 3.0, 1.0)
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
