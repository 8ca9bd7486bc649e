"""Checkpoint container.

A checkpoint is an ``.npz`` archive: one array per named parameter/buffer
(``state_dict`` names) plus a ``__meta__`` entry holding UTF-8 JSON with
the format tag, model config, lambda, lambda index and training step.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .model import DKIC, ModelConfig

__all__ = ["FORMAT", "load_checkpoint", "save_checkpoint"]

FORMAT = "dkic-checkpoint/1"


def save_checkpoint(model: DKIC, path, **extra) -> Path:
    path = Path(path)
    meta = {
        "format": FORMAT,
        "config": model.cfg.to_dict(),
        "lambda_index": int(model.lambda_index),
        "step": int(model.trained_steps),
        **extra,
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[DKIC, dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata record)")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != "__meta__"}
    model = DKIC(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.lambda_index = meta["lambda_index"]
    model.trained_steps = meta["step"]
    model.eval()
    return model, meta
