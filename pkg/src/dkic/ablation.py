"""Configuration sweeps over the architectural axes studied for the codec.

Two axes are provided: the LDCN kernel side (1, 3, 5) and the spatial stage
arrangement of the five channel groups. Each variant is trained briefly with
a shared seed and data stream, then coded for real on validation images so
the resulting RD points are directly comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch

from .codec import compress, decompress, pad_image
from .evaluation import psnr
from .model import DKIC, ModelConfig
from .range_coder import pack_bitstream
from .training import TrainConfig, evaluate_loss, lambda_index, train

__all__ = ["KERNEL_SIDES", "STAGE_ARRANGEMENTS", "AblationVariant", "ablation_variants", "run_ablation"]

KERNEL_SIDES = (1, 3, 5)
STAGE_ARRANGEMENTS = ((1, 1, 1, 1, 1), (2, 2, 2, 2, 2), (4, 2, 2, 2, 2), (4, 4, 2, 2, 2))


@dataclass(frozen=True)
class AblationVariant:
    axis: str
    value: tuple | int
    config: ModelConfig

    @property
    def name(self) -> str:
        v = "-".join(map(str, self.value)) if isinstance(self.value, tuple) else str(self.value)
        return f"{self.axis}={v}"


def ablation_variants(axis: str, base: ModelConfig | None = None) -> list[AblationVariant]:
    base = base or ModelConfig.toy()
    if axis == "kernel":
        return [AblationVariant(axis, k, base.replace(transform={"kernel_side": k})) for k in KERNEL_SIDES]
    if axis == "stages":
        return [
            AblationVariant(axis, s, base.replace(entropy={"stage_counts": s})) for s in STAGE_ARRANGEMENTS
        ]
    raise ValueError(f"unknown ablation axis {axis!r}; expected 'kernel' or 'stages'")


def run_ablation(
    axis: str,
    batches: Callable[[], Iterator[torch.Tensor]],
    val_images: Sequence[torch.Tensor],
    steps: int = 50,
    lam: float = 0.0130,
    seed: int = 0,
    out_path=None,
    base: ModelConfig | None = None,
) -> list[dict]:
    """Train each variant for ``steps`` steps and report one RD point per variant.

    ``batches`` is a factory so that every variant sees the same crop sequence.
    """
    cfg = TrainConfig.toy(lam=lam, seed=seed)
    val = torch.stack([pad_image(x)[0] for x in val_images]) if val_images else None
    results = []
    for variant in ablation_variants(axis, base):
        torch.manual_seed(seed)
        model = DKIC(variant.config)
        history = train(model, cfg, steps=steps, batches=batches())
        model.lambda_index = lambda_index(lam)
        total_bits = 0
        total_pixels = 0
        scores = []
        for x in val_images:
            data = pack_bitstream(compress(x, model))
            x_hat = decompress(data, model)
            total_bits += 8 * len(data)
            total_pixels += x.shape[1] * x.shape[2]
            scores.append(psnr((x * 255).round().numpy(), (x_hat * 255).round().numpy(), scale="byte"))
        sched = model.schedule
        results.append(
            {
                "variant": variant.name,
                "axis": axis,
                "value": list(variant.value) if isinstance(variant.value, tuple) else variant.value,
                "ar_steps": sched.num_steps,
                "schedule": [list(s) for s in sched.steps],
                "train_loss": history[-1]["loss"] if history else None,
                "val": evaluate_loss(model, val, lam) if val is not None else None,
                "bpp": total_bits / total_pixels if total_pixels else None,
                "psnr": sum(scores) / len(scores) if scores else None,
            }
        )
    if out_path is not None:
        Path(out_path).write_text(json.dumps(results, indent=2))
    return results
