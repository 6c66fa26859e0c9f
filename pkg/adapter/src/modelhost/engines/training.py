"""Torch-backed specialized-model training.

Classification fine-tunes a MobileNetV2 head-to-toe from random init (tiny
datasets and CPU-scale epochs are the expected regime here); detection
trains a small convolutional single-box regressor per class.  Per-epoch
validation scores are reported and the best-validation-epoch weights are
kept and returned as the opaque weights blob.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json

import cv2
import numpy as np

from ..raster import Dataset, ProtocolError, Sample, as_rgb

INPUT_SIZE = 32


def _torch():
    import torch

    return torch


def _seed_for(dataset: Dataset, config: dict) -> int:
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode() + str(dataset.seed).encode()
    )
    return int.from_bytes(digest.digest()[:4], "big")


def _to_tensor(images: list[np.ndarray]):
    torch = _torch()
    batch = np.stack(
        [
            cv2.resize(as_rgb(img), (INPUT_SIZE, INPUT_SIZE), interpolation=cv2.INTER_AREA)
            for img in images
        ]
    ).astype(np.float32)
    return torch.from_numpy(batch).permute(0, 3, 1, 2) / 255.0 - 0.5


def _recalibrate_batchnorm(model, x_train) -> None:
    """Re-estimate batch-norm running statistics over the training set.

    With a handful of samples the default momentum-averaged statistics sit
    far from the data, so eval-mode predictions collapse; a cumulative pass
    over the training tensor pins them to the actual train distribution.
    """
    torch = _torch()
    bn_layers = [
        m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)
    ]
    if not bn_layers:
        return
    saved_momentum = [bn.momentum for bn in bn_layers]
    for bn in bn_layers:
        bn.reset_running_stats()
        bn.momentum = None
    model.train()
    with torch.no_grad():
        model(x_train)
    for bn, momentum in zip(bn_layers, saved_momentum):
        bn.momentum = momentum


class TorchTrainer:
    def __init__(self, model_id: str, device: str = "cpu"):
        self.model_id = model_id
        self.device = device
        self._models: dict[str, dict] = {}

    # -- classification -------------------------------------------------------

    def _build_classifier(self, n_classes: int):
        from torchvision.models import mobilenet_v2

        return mobilenet_v2(weights=None, width_mult=0.5, num_classes=n_classes)

    def _train_classifier(self, dataset: Dataset, config: dict):
        torch = _torch()
        train, val = dataset.split()
        if not train or not val:
            raise ProtocolError("dataset must mark both train and val samples")
        classes = dataset.label_classes or sorted({s.label for s in train})
        index_of = {c: i for i, c in enumerate(classes)}
        epochs = int(config.get("epochs", 5))
        lr = float(config.get("learning_rate", 1e-3))
        batch_size = max(1, min(int(config.get("batch_size", 128)), len(train)))

        torch.manual_seed(_seed_for(dataset, config))
        model = self._build_classifier(len(classes)).to(self.device)
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        loss_fn = torch.nn.CrossEntropyLoss()
        x_train = _to_tensor([s.image for s in train]).to(self.device)
        y_train = torch.tensor([index_of[s.label] for s in train]).to(self.device)
        x_val = _to_tensor([s.image for s in val]).to(self.device)
        y_val = [index_of[s.label] for s in val]

        def validate() -> float:
            _recalibrate_batchnorm(model, x_train)
            model.eval()
            with torch.no_grad():
                predicted = model(x_val).argmax(dim=1).tolist()
            return sum(p == y for p, y in zip(predicted, y_val)) / len(y_val)

        best_state = copy.deepcopy(model.state_dict())
        best_score = -1.0
        scores: list[float] = []
        order = torch.randperm(len(train))
        for _ in range(epochs):
            model.train()
            for start in range(0, len(train), batch_size):
                idx = order[start : start + batch_size]
                optimizer.zero_grad()
                loss = loss_fn(model(x_train[idx]), y_train[idx])
                loss.backward()
                optimizer.step()
            score = validate()
            scores.append(score)
            if score > best_score:
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        record = {"task": "classification", "classes": classes, "model": model}
        return record, scores, best_state

    # -- detection -------------------------------------------------------------

    def _build_detector(self, n_classes: int):
        torch = _torch()

        return torch.nn.Sequential(
            torch.nn.Conv2d(3, 16, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(16, 32, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(32, 64, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.AdaptiveAvgPool2d(1),
            torch.nn.Flatten(),
            torch.nn.Linear(64, n_classes * 5),
        )

    def _detection_targets(self, samples: list[Sample], n_classes: int):
        torch = _torch()
        boxes = torch.zeros((len(samples), n_classes, 4))
        present = torch.zeros((len(samples), n_classes))
        for i, sample in enumerate(samples):
            h, w = sample.image.shape[:2]
            for cid, x, y, bw, bh in sample.boxes:
                if cid >= n_classes:
                    continue
                boxes[i, cid] = torch.tensor(
                    [(x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h]
                )
                present[i, cid] = 1.0
        return boxes, present

    def _train_detector(self, dataset: Dataset, config: dict):
        torch = _torch()
        train, val = dataset.split()
        if not train or not val:
            raise ProtocolError("dataset must mark both train and val samples")
        n_classes = 1 + max(
            (cid for s in dataset.samples for cid, *_ in s.boxes), default=0
        )
        epochs = int(config.get("epochs", 5))
        lr = float(config.get("learning_rate", 1e-2))
        batch_size = max(1, min(int(config.get("batch_size", 16)), len(train)))

        torch.manual_seed(_seed_for(dataset, config))
        model = self._build_detector(n_classes).to(self.device)
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        x_train = _to_tensor([s.image for s in train]).to(self.device)
        box_t, present_t = self._detection_targets(train, n_classes)
        x_val = _to_tensor([s.image for s in val]).to(self.device)
        box_v, present_v = self._detection_targets(val, n_classes)
        bce = torch.nn.BCEWithLogitsLoss()

        def forward(x):
            out = model(x).view(-1, n_classes, 5)
            return out[:, :, :4], out[:, :, 4]

        def validate() -> float:
            model.eval()
            with torch.no_grad():
                pred_boxes, logits = forward(x_val)
                mask = present_v.bool()
                if not mask.any():
                    return 0.0
                box_err = (pred_boxes.sigmoid()[mask] - box_v[mask]).abs().mean().item()
            return max(0.0, 1.0 - box_err)

        best_state = copy.deepcopy(model.state_dict())
        best_score = -1.0
        scores: list[float] = []
        for _ in range(epochs):
            model.train()
            order = torch.randperm(len(train))
            for start in range(0, len(train), batch_size):
                idx = order[start : start + batch_size]
                optimizer.zero_grad()
                pred_boxes, logits = forward(x_train[idx])
                mask = present_t[idx].bool()
                loss = bce(logits, present_t[idx])
                if mask.any():
                    loss = loss + ((pred_boxes.sigmoid() - box_t[idx])[mask] ** 2).mean()
                loss.backward()
                optimizer.step()
            score = validate()
            scores.append(score)
            if score > best_score:
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        record = {"task": "detection", "n_classes": n_classes, "model": model}
        return record, scores, best_state

    # -- public surface -----------------------------------------------------------

    def train(self, dataset: Dataset, config: dict) -> tuple[str, list[float], bytes]:
        torch = _torch()
        if dataset.task_kind == "classification":
            record, scores, state = self._train_classifier(dataset, config)
        else:
            record, scores, state = self._train_detector(dataset, config)
        digest = hashlib.sha256(
            json.dumps(config, sort_keys=True, default=str).encode()
            + str(len(dataset.samples)).encode()
            + str(dataset.seed).encode()
        ).hexdigest()[:12]
        ref = ("clf-" if record["task"] == "classification" else "det-") + digest
        self._models[ref] = record
        buffer = io.BytesIO()
        torch.save(state, buffer)
        return ref, scores, buffer.getvalue()

    def _lookup(self, model_ref: str, task: str) -> dict:
        record = self._models.get(model_ref)
        if record is None or record["task"] != task:
            raise ProtocolError(f"unknown {task} model {model_ref!r}", code="unknown-model")
        return record

    def predict_classes(self, model_ref: str, images: list[np.ndarray]):
        torch = _torch()
        record = self._lookup(model_ref, "classification")
        model = record["model"]
        model.eval()
        with torch.no_grad():
            probs = torch.softmax(model(_to_tensor(images).to(self.device)), dim=1)
        out = []
        for row in probs:
            idx = int(row.argmax())
            out.append((record["classes"][idx], float(row[idx])))
        return out

    def predict_detections(self, model_ref: str, images: list[np.ndarray]):
        torch = _torch()
        record = self._lookup(model_ref, "detection")
        model = record["model"]
        n_classes = record["n_classes"]
        model.eval()
        with torch.no_grad():
            raw = model(_to_tensor(images).to(self.device)).view(-1, n_classes, 5)
            boxes = raw[:, :, :4].sigmoid()
            confidence = raw[:, :, 4].sigmoid()
        results = []
        for i, img in enumerate(images):
            h, w = img.shape[:2]
            per_image = []
            for cid in range(n_classes):
                conf = float(confidence[i, cid])
                if conf < 0.05:
                    continue
                cx, cy, bw, bh = (float(v) for v in boxes[i, cid])
                bw = max(bw * w, 1.0)
                bh = max(bh * h, 1.0)
                x = min(max(cx * w - bw / 2, 0.0), w - 1.0)
                y = min(max(cy * h - bh / 2, 0.0), h - 1.0)
                per_image.append(
                    {
                        "x": x,
                        "y": y,
                        "w": min(bw, w - x),
                        "h": min(bh, h - y),
                        "class_id": cid,
                        "confidence": round(conf, 6),
                    }
                )
            results.append(per_image)
        return results
