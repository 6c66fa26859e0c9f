"""Deterministic procedural backend for GPU-free end-to-end runs.

Generation is a seeded smooth texture whose palette is derived from the
prompt; fine-tuning records per-channel statistics and a palette from the
reference images, and generation with a fine-tuned model blends the
procedural texture toward those statistics (weight 0.7).  That construction
makes the privacy trends measurable: synthetic output from a model
fine-tuned on raw references is statistically closer to the references than
pretrained output, and all outputs are bitwise reproducible for a fixed
(model_ref, prompt, seed).

The training side is a nearest-class-mean model over per-image statistics
for classification, and a nearest-mean pixel labeller with connected
components for detection.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
from scipy import ndimage

from . import imaging
from .backends import Backend, BackendCapabilities, TrainResult
from .dataset import BBox, Detection
from .errors import GenerationFailedError, TrainingFailedError
from .privacy import EmbeddingVector
from .sanitizer import TaskKind

PROVIDER = "mock-procedural-v1"
EMBED_PROVIDER = "mock-stats-v1"

ENDPOINTS = (
    "fine_tune",
    "generate",
    "condition_generate",
    "inpaint",
    "embed",
    "segment",
    "train",
    "predict",
)

#: Blend weight pulling generated textures toward fine-tune statistics.
FINETUNE_BLEND = 0.7


def _rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency random field in [0, 1] (sum of oriented sinusoids)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    field = np.zeros((h, w))
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 3.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.4, 1.0)
        field += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    field -= field.min()
    field /= max(np.ptp(field), 1e-9)
    return field


def _prompt_palette(prompt: str) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng("palette", prompt)
    c0 = rng.uniform(20, 235, size=3)
    c1 = rng.uniform(20, 235, size=3)
    return c0, c1


def _texture(rng, h, w, c0, c1) -> np.ndarray:
    t = _smooth_field(rng, h, w)[:, :, None]
    img = c0 * (1.0 - t) + c1 * t + rng.normal(0.0, 4.0, size=(h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def _blob_mask(rng, h, w) -> np.ndarray:
    """Wobbly ellipse alpha covering a central chunk of the canvas."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = yy / max(h - 1, 1) * 2 - 1
    xx = xx / max(w - 1, 1) * 2 - 1
    cx, cy = rng.uniform(-0.1, 0.1, size=2)
    rx, ry = rng.uniform(0.45, 0.7, size=2)
    angle = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0 + 0.2 * np.sin(3 * angle + rng.uniform(0, 2 * np.pi))
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= wobble
    if not mask.any():
        mask[h // 2, w // 2] = True
    return mask


def _foreground(img: np.ndarray) -> np.ndarray:
    rgb = img if img.ndim == 3 else img[:, :, None]
    fg = np.any(rgb != 0, axis=2)
    if not fg.any():
        fg = np.ones(img.shape[:2], dtype=np.bool_)
    return fg


def _stats_features(img: np.ndarray) -> np.ndarray:
    """Foreground-weighted statistics vector (the mock embedding space)."""
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = img[:, :, :3]
    fg = _foreground(img)
    pixels = img[fg].astype(np.float64)
    mean = pixels.mean(axis=0) / 255.0
    std = pixels.std(axis=0) / 128.0
    gray = imaging.to_grayscale(img)
    hist = np.bincount(gray[fg] // 16, minlength=16).astype(np.float64)
    hist /= hist.sum()
    area = np.array([fg.mean()])
    return np.concatenate([mean, std, hist, area])


class MockBackend(Backend):
    def __init__(self, canvas_size: tuple[int, int] = (64, 64)):
        self.canvas_size = canvas_size
        self._models: dict[str, dict] = {}

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(provider=PROVIDER, deterministic=True, endpoints=ENDPOINTS)

    # -- generation ---------------------------------------------------------

    def fine_tune(self, role_key, references, config):
        if not references:
            raise GenerationFailedError("fine_tune requires at least one reference image")
        digest = hashlib.sha256()
        digest.update(role_key.encode())
        digest.update(json.dumps(config, sort_keys=True).encode())
        pixels = []
        for ref in references:
            imaging.ensure_image(ref)
            digest.update(ref.tobytes())
            digest.update(str(ref.shape).encode())
            rgb = ref if ref.ndim == 3 else np.repeat(ref[:, :, None], 3, axis=2)
            pixels.append(rgb[:, :, :3][_foreground(ref)].astype(np.float64))
        stacked = np.concatenate(pixels, axis=0)
        model_ref = "ft-" + digest.hexdigest()[:12]
        self._models[model_ref] = {
            "kind": "generator",
            "mean": stacked.mean(axis=0),
            "std": stacked.std(axis=0) + 1e-6,
            "lo": np.percentile(stacked, 25, axis=0),
            "hi": np.percentile(stacked, 75, axis=0),
        }
        return model_ref

    def _generator_model(self, model_ref: str) -> dict | None:
        if model_ref == "pretrained":
            return None
        model = self._models.get(model_ref)
        if model is None or model.get("kind") != "generator":
            raise GenerationFailedError(f"unknown generation model {model_ref!r}")
        return model

    def _render(self, model, prompt, seed, key) -> np.ndarray:
        h, w = self.canvas_size[1], self.canvas_size[0]
        rng = _rng(key, prompt, seed)
        if model is None:
            c0, c1 = _prompt_palette(prompt)
        else:
            c0, c1 = model["lo"], model["hi"]
        tex = _texture(rng, h, w, c0, c1).astype(np.float64)
        if model is not None:
            cur_mean = tex.reshape(-1, 3).mean(axis=0)
            cur_std = tex.reshape(-1, 3).std(axis=0) + 1e-6
            matched = (tex - cur_mean) / cur_std * model["std"] + model["mean"]
            tex = (1.0 - FINETUNE_BLEND) * tex + FINETUNE_BLEND * matched
        return np.clip(tex, 0, 255).astype(np.uint8)

    def generate(self, model_ref, prompt, seed, want_alpha=False):
        model = self._generator_model(model_ref)
        image = self._render(model, prompt, seed, "generate")
        alpha = None
        if want_alpha:
            alpha = _blob_mask(_rng("alpha", model_ref, prompt, seed), *image.shape[:2])
        return image, alpha

    def condition_generate(self, features, prompt, seed, count):
        if count < 1:
            raise GenerationFailedError("condition_generate count must be >= 1")
        out = []
        for f_idx, feature in enumerate(features):
            imaging.ensure_image(feature)
            edge = _foreground(feature)
            for k in range(count):
                rng = _rng("conditioned", prompt, seed, f_idx, k)
                c0, c1 = _prompt_palette(prompt)
                h, w = feature.shape[:2]
                tex = _texture(rng, h, w, c0, c1).astype(np.float64)
                tex[edge] *= 0.3
                out.append(np.clip(tex, 0, 255).astype(np.uint8))
        return out

    def inpaint(self, model_ref, canvas, mask, prompt, seed):
        imaging.ensure_image(canvas)
        imaging.ensure_mask(mask, like=canvas)
        model = self._generator_model(model_ref)
        rng = _rng("inpaint", model_ref, prompt, seed)
        if model is None:
            c0, c1 = _prompt_palette(prompt)
        else:
            c0, c1 = model["lo"], model["hi"]
        h, w = canvas.shape[:2]
        tex = _texture(rng, h, w, c0, c1).astype(np.float64)
        if model is not None:
            cur_mean = tex.reshape(-1, 3).mean(axis=0)
            cur_std = tex.reshape(-1, 3).std(axis=0) + 1e-6
            tex = (1.0 - FINETUNE_BLEND) * tex + FINETUNE_BLEND * (
                (tex - cur_mean) / cur_std * model["std"] + model["mean"]
            )
        fill = np.clip(tex, 0, 255).astype(np.uint8)
        out = canvas.copy() if canvas.ndim == 3 else np.repeat(canvas[:, :, None], 3, axis=2)
        out = out[:, :, :3].copy()
        out[mask] = fill[mask]
        return out

    # -- embeddings and segmentation ----------------------------------------

    def embed_images(self, images):
        vectors = []
        for img in images:
            v = _stats_features(img)
            vectors.append(EmbeddingVector(v / np.linalg.norm(v), EMBED_PROVIDER))
        return vectors

    def embed_text(self, text):
        rng = _rng("text-embedding", text)
        v = rng.normal(0.0, 1.0, size=23)
        return EmbeddingVector(v / np.linalg.norm(v), EMBED_PROVIDER)

    def segment(self, image, targets):
        imaging.ensure_image(image)
        h, w = image.shape[:2]
        results = []
        n = len(targets)
        for i, desc in enumerate(targets):
            rng = _rng("segment", hashlib.sha256(image.tobytes()).hexdigest(), desc, i)
            mask = _blob_mask(rng, h, w)
            # shrink and shift so multiple targets stay disjoint-ish
            if n > 1:
                cols = np.array_split(np.arange(w), n)
                keep = np.zeros((h, w), dtype=np.bool_)
                keep[:, cols[i]] = True
                mask &= keep
                if not mask.any():
                    mask[h // 2, cols[i][len(cols[i]) // 2]] = True
            results.append((mask, round(0.9 - 0.05 * i, 4)))
        return results

    # -- specialized-model training ------------------------------------------

    def train(self, train_set, validation_set, config):
        if len(train_set) == 0 or len(validation_set) == 0:
            raise TrainingFailedError("train and validation sets must be non-empty")
        epochs = int(config.get("epochs", 5))
        if epochs < 0:
            raise TrainingFailedError("epochs must be >= 0")
        if train_set.task_kind is TaskKind.CLASSIFICATION:
            model, scores = self._train_classifier(train_set, validation_set, epochs)
        else:
            model, scores = self._train_detector(train_set, validation_set, epochs)
        digest = hashlib.sha256(
            json.dumps(
                {"config": config, "seed": train_set.seed, "n": len(train_set)}, sort_keys=True
            ).encode()
        )
        for sample in train_set.samples:
            digest.update(sample.image.tobytes())
        ref = ("clf-" if model["task"] == "classification" else "det-") + digest.hexdigest()[:12]
        self._models[ref] = model
        weights = json.dumps(
            model,
            sort_keys=True,
            default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o),
        ).encode()
        return TrainResult(model_ref=ref, epoch_scores=scores, weights=weights)

    def _train_classifier(self, train_set, validation_set, epochs):
        classes = list(train_set.request.label_classes)
        order = _rng("train-order", train_set.seed, len(train_set)).permutation(len(train_set))
        feats = [_stats_features(s.image) for s in train_set.samples]
        labels = [s.label for s in train_set.samples]
        val_feats = [_stats_features(s.image) for s in validation_set.samples]
        val_labels = [s.label for s in validation_set.samples]

        def fit(count):
            sums = {c: np.zeros(feats[0].size) for c in classes}
            counts = {c: 0 for c in classes}
            for idx in order[:count]:
                sums[labels[idx]] += feats[idx]
                counts[labels[idx]] += 1
            return {
                c: (sums[c] / counts[c] if counts[c] else None) for c in classes
            }

        def score(means):
            hits = 0
            for f, y in zip(val_feats, val_labels):
                pred, _ = _nearest_class(f, means, classes)
                hits += pred == y
            return hits / len(val_labels)

        best_means, best_score, scores = None, -1.0, []
        if epochs == 0:
            best_means = {c: None for c in classes}
        for e in range(epochs):
            count = max(1, math.ceil(len(feats) * (e + 1) / epochs))
            means = fit(count)
            s = score(means)
            scores.append(s)
            if s > best_score:
                best_means, best_score = means, s
        model = {
            "task": "classification",
            "classes": classes,
            "means": {c: (m if m is not None else None) for c, m in best_means.items()},
        }
        return model, scores

    def _train_detector(self, train_set, validation_set, epochs):
        from . import utility

        n_classes = 1 + max(
            (cid for s in train_set.samples for cid, _ in s.label), default=0
        )
        order = _rng("train-order", train_set.seed, len(train_set)).permutation(len(train_set))

        def fit(count):
            target_sum = np.zeros((n_classes, 3))
            target_n = np.zeros(n_classes)
            bg_sum = np.zeros(3)
            bg_n = 0
            for idx in order[:count]:
                sample = train_set.samples[idx]
                img = sample.image[:, :, :3].astype(np.float64)
                inside = np.zeros(img.shape[:2], dtype=np.bool_)
                for cid, box in sample.label:
                    x0, y0, x1, y1 = (int(round(v)) for v in box.as_xyxy())
                    region = img[y0:y1, x0:x1]
                    target_sum[cid] += region.reshape(-1, 3).sum(axis=0)
                    target_n[cid] += region.shape[0] * region.shape[1]
                    inside[y0:y1, x0:x1] = True
                bg_pixels = img[~inside]
                bg_sum += bg_pixels.sum(axis=0)
                bg_n += len(bg_pixels)
            means = [
                (target_sum[c] / target_n[c]).tolist() if target_n[c] else None
                for c in range(n_classes)
            ]
            return {"targets": means, "background": (bg_sum / max(bg_n, 1)).tolist()}

        def score(model):
            preds = [
                _detect(s.image, model) for s in validation_set.samples
            ]
            truths = [s.label for s in validation_set.samples]
            try:
                return utility.map50(preds, truths)
            except Exception:
                return 0.0

        best, best_score, scores = None, -1.0, []
        if epochs == 0:
            best = {"targets": [None] * n_classes, "background": [0.0, 0.0, 0.0]}
        for e in range(epochs):
            count = max(1, math.ceil(len(train_set) * (e + 1) / epochs))
            candidate = fit(count)
            s = score(candidate)
            scores.append(s)
            if s > best_score:
                best, best_score = candidate, s
        model = {"task": "detection", "n_classes": n_classes, **best}
        return model, scores

    def _trained(self, model_ref, task):
        model = self._models.get(model_ref)
        if model is None or model.get("task") != task:
            raise TrainingFailedError(f"unknown {task} model {model_ref!r}")
        return model

    def predict_classes(self, model_ref, images):
        model = self._trained(model_ref, "classification")
        out = []
        for img in images:
            pred, conf = _nearest_class(_stats_features(img), model["means"], model["classes"])
            out.append((pred, conf))
        return out

    def predict_detections(self, model_ref, images):
        model = self._trained(model_ref, "detection")
        return [_detect(img, model) for img in images]


def _nearest_class(features, means, classes) -> tuple[str, float]:
    fitted = [(c, m) for c, m in means.items() if m is not None]
    if not fitted:
        return classes[0], 1.0 / len(classes)
    dists = np.array([np.linalg.norm(features - np.asarray(m)) for _, m in fitted])
    weights = np.exp(-dists + dists.min())
    weights /= weights.sum()
    best = int(np.argmin(dists))
    return fitted[best][0], float(weights[best])


def _detect(image, model) -> list[Detection]:
    img = image[:, :, :3].astype(np.float64) if image.ndim == 3 else np.repeat(
        image[:, :, None], 3, axis=2
    ).astype(np.float64)
    bg = np.asarray(model["background"])
    detections = []
    for cid, mean in enumerate(model["targets"]):
        if mean is None:
            continue
        target_dist = np.linalg.norm(img - np.asarray(mean), axis=2)
        bg_dist = np.linalg.norm(img - bg, axis=2)
        mask = target_dist < bg_dist
        labels, count = ndimage.label(mask)
        if count == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
        biggest = int(np.argmax(sizes)) + 1
        ys, xs = np.nonzero(labels == biggest)
        margin = float(np.clip((bg_dist[ys, xs] - target_dist[ys, xs]).mean() / 255.0, 0.0, 1.0))
        detections.append(
            Detection(
                BBox(float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)),
                cid,
                round(0.5 + margin / 2, 6),
            )
        )
    return detections
