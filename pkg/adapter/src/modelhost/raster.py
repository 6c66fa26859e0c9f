"""PNG payload handling and the dataset-zip file schema the protocol uses.

Datasets arrive as a zip with ``manifest.json``, ``images/*.png`` and, for
detection, ``labels/*.txt`` sidecars of normalized ``class cx cy w h``
lines; samples may carry a ``split`` marker ("train"/"val").
"""

from __future__ import annotations

import base64
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage


class ProtocolError(ValueError):
    """Client-side protocol violation; maps to a 4xx error envelope."""

    def __init__(self, message: str, code: str = "schema", retryable: bool = False):
        super().__init__(message)
        self.code = code
        self.retryable = retryable


def decode_png_b64(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
        with PILImage.open(io.BytesIO(raw)) as pil:
            if pil.mode not in ("L", "RGB", "RGBA"):
                pil = pil.convert("RGB")
            return np.asarray(pil, dtype=np.uint8).copy()
    except ProtocolError:
        raise
    except Exception as exc:
        raise ProtocolError(f"cannot decode PNG payload: {exc}") from exc


def encode_png_b64(img: np.ndarray) -> str:
    if img.dtype == np.bool_:
        img = np.where(img, 255, 0).astype(np.uint8)
    mode = {2: "L", 3: "RGB"}[img.ndim] if img.ndim == 2 or img.shape[2] == 3 else "RGBA"
    buf = io.BytesIO()
    PILImage.fromarray(img, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def as_rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    return img[:, :, :3]


def as_mask(img: np.ndarray) -> np.ndarray:
    mask = img != 0 if img.ndim == 2 else np.any(img[:, :, :3] != 0, axis=2)
    return mask


@dataclass
class Sample:
    image: np.ndarray
    label: str | None
    boxes: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    split: str | None = None


@dataclass
class Dataset:
    task_kind: str
    label_classes: list[str]
    samples: list[Sample]
    seed: int = 0

    def split(self) -> tuple[list[Sample], list[Sample]]:
        train = [s for s in self.samples if s.split != "val"]
        val = [s for s in self.samples if s.split == "val"]
        return train, val


def read_dataset_zip(data: bytes) -> Dataset:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise ProtocolError(f"invalid dataset zip: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise ProtocolError("dataset zip is missing manifest.json") from exc
        request = manifest.get("request", {})
        task_kind = request.get("task_kind", "classification")
        classes = list(request.get("label_classes", []))
        samples = []
        for i, doc in enumerate(manifest.get("samples", [])):
            try:
                with PILImage.open(io.BytesIO(zf.read(doc["file"]))) as pil:
                    image = np.asarray(pil.convert("RGB"), dtype=np.uint8)
            except Exception as exc:
                raise ProtocolError(f"samples[{i}]: unreadable image: {exc}") from exc
            boxes = []
            if doc.get("label_file"):
                h, w = image.shape[:2]
                for line in zf.read(doc["label_file"]).decode().splitlines():
                    parts = line.split()
                    if not parts:
                        continue
                    cid = int(parts[0])
                    cx, cy, bw, bh = (float(p) for p in parts[1:5])
                    boxes.append((cid, (cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h))
            samples.append(
                Sample(image, doc.get("label"), boxes, doc.get("split"))
            )
        if not samples:
            raise ProtocolError("dataset zip holds no samples")
        return Dataset(task_kind, classes, samples, int(manifest.get("seed", 0)))
