"""Adapter configuration: one model id per capability plus the fine-tuning
hyperparameter block that is forwarded opaquely into fine-tune records."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "MODELHOST_"

#: Diffusion-style fine-tuning block carried verbatim (no trainer consumes it
#: in the classical engines; real diffusion engines read it when enabled).
FINE_TUNE_DEFAULTS = {
    "learning_rate": 2e-6,
    "special_token": "xyz->style",
    "prior_loss_weight": 0.01,
    "gradient_accumulation_steps": 2,
    "max_steps": 800,
}


@dataclass
class AdapterConfig:
    host: str = "127.0.0.1"
    port: int = 8788
    device: str = "cpu"
    generation_model: str = "classic-spectral-v1"
    embedding_model: str = "classic-descriptor-v1"
    segmentation_model: str = "grabcut-v1"
    training_model: str = "torch-mobilenet-v2"
    inpaint_merge_ratio: float = 0.5
    fine_tune: dict = field(default_factory=lambda: dict(FINE_TUNE_DEFAULTS))

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> "AdapterConfig":
        values: dict = {}
        if path is not None:
            values.update(json.loads(Path(path).read_text()))
        env = os.environ if env is None else env
        for f in fields(cls):
            key = ENV_PREFIX + f.name.upper()
            if key in env:
                values[f.name] = env[key]
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown adapter config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.port = int(cfg.port)
        cfg.inpaint_merge_ratio = float(cfg.inpaint_merge_ratio)
        return cfg

    def model_ids(self) -> dict[str, str]:
        return {
            "generation": self.generation_model,
            "embedding": self.embedding_model,
            "segmentation": self.segmentation_model,
            "training": self.training_model,
        }
