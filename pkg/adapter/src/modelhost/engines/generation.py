"""Classical generation engines.

Texture synthesis is random-phase spectral synthesis: a magnitude spectrum
(either a 1/f envelope for the pretrained path, or the average spectrum of
the fine-tune references) is combined with seeded random phases and
inverse-transformed, then colorized from the prompt palette or the fitted
reference color statistics.  Inpainting fills the masked region with a
Navier-Stokes/TELEA reconstruction near the boundary blended into model
texture in the interior.  Everything is a pure function of
(model_ref, prompt, seed), so the engine is deterministic.
"""

from __future__ import annotations

import hashlib
import json

import cv2
import numpy as np
from scipy import ndimage

from ..raster import ProtocolError, as_mask, as_rgb

ANALYSIS_SIZE = 64
PRETRAINED = "pretrained"


def _digest_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _prompt_palette(prompt: str) -> tuple[np.ndarray, np.ndarray]:
    rng = _digest_rng("palette", prompt)
    return rng.uniform(25, 230, 3), rng.uniform(25, 230, 3)


def _one_over_f_spectrum(size: int, alpha: float = 1.5) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.hypot(fy, fx)
    radius[0, 0] = 1.0
    spectrum = radius**-alpha
    spectrum[0, 0] = 0.0
    return spectrum


def _random_phase_field(spectrum: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi, size=spectrum.shape)
    field = np.fft.irfft2(spectrum * np.exp(1j * phase), s=(size, size))
    field -= field.min()
    field /= max(np.ptp(field), 1e-9)
    return field


class SpectralGenerator:
    """Fine-tunable texture model registry keyed by content-derived refs."""

    def __init__(self, model_id: str, output_size: int = 64, inpaint_merge_ratio: float = 0.5):
        self.model_id = model_id
        self.output_size = output_size
        self.inpaint_merge_ratio = inpaint_merge_ratio
        self._models: dict[str, dict] = {}

    def fine_tune(self, role: str, references: list[np.ndarray], config: dict) -> str:
        if not references:
            raise ProtocolError("fine_tune requires at least one reference image")
        digest = hashlib.sha256()
        digest.update(role.encode())
        digest.update(json.dumps(config, sort_keys=True, default=str).encode())
        spectra = []
        pixels = []
        for ref in references:
            rgb = as_rgb(ref)
            digest.update(rgb.tobytes())
            fg = as_mask(ref)
            if not fg.any():
                fg = np.ones(rgb.shape[:2], dtype=bool)
            pixels.append(rgb[fg].astype(np.float64))
            gray = cv2.resize(
                cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY),
                (ANALYSIS_SIZE, ANALYSIS_SIZE),
                interpolation=cv2.INTER_AREA,
            ).astype(np.float64)
            spectra.append(np.abs(np.fft.rfft2(gray - gray.mean())))
        stacked = np.concatenate(pixels, axis=0)
        spectrum = np.mean(spectra, axis=0)
        spectrum[0, 0] = 0.0
        model_ref = "ft-" + digest.hexdigest()[:12]
        self._models[model_ref] = {
            "mean": stacked.mean(axis=0),
            "std": stacked.std(axis=0) + 1e-6,
            "spectrum": spectrum,
            "config": dict(config),
        }
        return model_ref

    def _lookup(self, model_ref: str) -> dict | None:
        if model_ref == PRETRAINED:
            return None
        model = self._models.get(model_ref)
        if model is None:
            raise ProtocolError(
                f"unknown generation model {model_ref!r}", code="unknown-model"
            )
        return model

    def _texture(self, model: dict | None, prompt: str, seed: int, size: int, key: str) -> np.ndarray:
        rng = _digest_rng(self.model_id, key, prompt, seed)
        if model is None:
            spectrum = _one_over_f_spectrum(size)
            field = _random_phase_field(spectrum, rng, size)
            c0, c1 = _prompt_palette(prompt)
            img = c0 * (1 - field[:, :, None]) + c1 * field[:, :, None]
        else:
            spectrum = model["spectrum"]
            if size != ANALYSIS_SIZE:
                spectrum = cv2.resize(spectrum, (size // 2 + 1, size))
            field = _random_phase_field(spectrum, rng, size)
            centered = (field - field.mean()) / max(field.std(), 1e-9)
            img = model["mean"][None, None, :] + centered[:, :, None] * model["std"][None, None, :]
        img = img + rng.normal(0, 2.5, img.shape)
        return np.clip(img, 0, 255).astype(np.uint8)

    def generate(
        self, model_ref: str, prompt: str, seed: int, want_alpha: bool
    ) -> tuple[np.ndarray, np.ndarray | None]:
        model = self._lookup(model_ref)
        size = self.output_size
        image = self._texture(model, prompt, seed, size, "generate")
        alpha = None
        if want_alpha:
            rng = _digest_rng(self.model_id, "alpha", model_ref, prompt, seed)
            field = _random_phase_field(_one_over_f_spectrum(size, 2.5), rng, size)
            mask = (field >= np.quantile(field, 0.62)).astype(np.uint8)
            count, labels, stats, _ = cv2.connectedComponentsWithStats(mask)
            if count > 1:
                biggest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
                mask = labels == biggest
            else:
                mask = np.zeros((size, size), dtype=bool)
                mask[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = True
            alpha = ndimage.binary_fill_holes(mask)
        return image, alpha

    def condition_generate(
        self, features: list[np.ndarray], prompt: str, seed: int, count: int
    ) -> list[np.ndarray]:
        if count < 1:
            raise ProtocolError("condition_generate count must be >= 1")
        out = []
        for f_idx, feature in enumerate(features):
            edges = as_mask(feature)
            h, w = edges.shape
            inverse = np.where(edges, 0, 255).astype(np.uint8)
            distance = cv2.distanceTransform(inverse, cv2.DIST_L2, 3)
            guide = np.clip(distance / 6.0, 0.0, 1.0)
            for k in range(count):
                base = self._texture(None, prompt, seed + 7919 * f_idx + k, max(h, w), "cond")
                base = base[:h, :w].astype(np.float64)
                shaded = base * (0.3 + 0.7 * guide[:, :, None])
                out.append(np.clip(shaded, 0, 255).astype(np.uint8))
        return out

    def inpaint(
        self, model_ref: str, canvas: np.ndarray, mask: np.ndarray, prompt: str, seed: int
    ) -> np.ndarray:
        model = self._lookup(model_ref)
        rgb = as_rgb(canvas)
        h, w = rgb.shape[:2]
        mask_u8 = np.where(mask, 255, 0).astype(np.uint8)
        boundary_fill = cv2.inpaint(rgb, mask_u8, 3, cv2.INPAINT_TELEA).astype(np.float64)
        texture = self._texture(model, prompt, seed, max(h, w), "inpaint")[:h, :w].astype(np.float64)
        distance = cv2.distanceTransform(mask_u8, cv2.DIST_L2, 3)
        interior = np.clip(distance / 6.0, 0.0, 1.0)[:, :, None]
        weight = np.clip(interior * 2.0 * self.inpaint_merge_ratio, 0.0, 1.0)
        fill = boundary_fill * (1.0 - weight) + texture * weight
        out = rgb.copy()
        out[mask] = np.clip(fill, 0, 255).astype(np.uint8)[mask]
        return out
