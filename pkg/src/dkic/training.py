"""Rate-distortion training: loss, optimiser step, data ingestion and the loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .checkpoint import save_checkpoint
from .codec import NumericFailure
from .model import DKIC

__all__ = [
    "LAMBDA_GRID",
    "RdStats",
    "TrainConfig",
    "evaluate_loss",
    "ingest_dataset",
    "lambda_index",
    "learning_rate",
    "load_images",
    "make_optimizer",
    "rd_loss",
    "train",
    "train_step",
]

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def lambda_index(lam: float) -> int:
    """Position of ``lam`` in the grid, or 255 for a custom value."""
    for i, v in enumerate(LAMBDA_GRID):
        if math.isclose(lam, v, rel_tol=1e-9):
            return i
    return 255


@dataclass
class TrainConfig:
    lam: float = 0.0130
    batch_size: int = 8
    crop: int = 256
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    epochs: int = 400
    lr_drop_epoch: int = 380
    epoch_size: int = 20000
    seed: int = 0
    dataset_path: str = ""
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be a positive number, got {self.lam}")
        if self.crop <= 0 or self.crop % 64:
            raise ValueError(f"crop must be a positive multiple of 64, got {self.crop}")
        if self.batch_size <= 0 or self.epochs <= 0 or self.epoch_size <= 0:
            raise ValueError("batch_size, epochs and epoch_size must be positive")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.epoch_size / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Desk-scale schedule: 64px crops, 500 crops per epoch, 32 epochs (2016 steps).

        The learning rates are ten times the full-scale ones because the run
        is three orders of magnitude shorter; the drop keeps the 10x ratio and
        happens at 95% of the run.
        """
        base = dict(crop=64, epochs=32, lr_drop_epoch=30, epoch_size=500, lr_initial=1e-3, lr_final=1e-4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RdStats:
    """Loss terms of one evaluation; tensors keep the autograd graph."""

    distortion: torch.Tensor
    rate_y: torch.Tensor
    rate_z: torch.Tensor
    loss: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "loss": self.loss.item(),
            "D": self.distortion.item(),
            "R_y": self.rate_y.item(),
            "R_z": self.rate_z.item(),
        }


def rd_loss(x, x_hat, likelihoods_y, likelihoods_z, lam: float) -> RdStats:
    """``lam * D + R_y + R_z``; D is the MSE on the 0-255 scale, rates in bits per pixel."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    b, _, h, w = x.shape
    pixels = b * h * w
    distortion = 255.0**2 * torch.mean((x - x_hat) ** 2)
    rate_y = -torch.log2(likelihoods_y).sum() / pixels
    rate_z = -torch.log2(likelihoods_z).sum() / pixels
    loss = lam * distortion + rate_y + rate_z
    if not torch.isfinite(loss):
        raise NumericFailure("non-finite rate-distortion loss")
    return RdStats(distortion, rate_y, rate_z, loss)


def make_optimizer(model: DKIC, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr_initial, betas=(0.9, 0.999), weight_decay=cfg.weight_decay
    )


def learning_rate(step: int, cfg: TrainConfig) -> float:
    epoch = step // cfg.steps_per_epoch
    return cfg.lr_initial if epoch < cfg.lr_drop_epoch else cfg.lr_final


def _diagnostics(model: DKIC, out: dict) -> dict:
    snap = {"step": model.trained_steps}
    for key in ("y", "y_hat", "x_hat", "sigma"):
        t = out.get(key)
        if t is not None:
            t = t.detach()
            snap[key] = {
                "finite": bool(torch.isfinite(t).all()),
                "absmax": float(t.abs().nan_to_num(posinf=0, neginf=0).max()),
            }
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    snap["nonfinite_params"] = bad[:10]
    return snap


def train_step(
    batch: torch.Tensor,
    model: DKIC,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
) -> RdStats:
    """One AdamW step on the RD loss; raises :class:`NumericFailure` on NaN."""
    model.train()
    out = model(batch, generator)
    try:
        stats = rd_loss(batch, out["x_hat"], out["likelihoods"]["y"], out["likelihoods"]["z"], cfg.lam)
    except NumericFailure as exc:
        raise NumericFailure(f"{exc}; diagnostics: {json.dumps(_diagnostics(model, out))}") from exc
    optimizer.zero_grad(set_to_none=True)
    stats.loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    model.trained_steps += 1
    return stats


@torch.no_grad()
def evaluate_loss(model: DKIC, batch: torch.Tensor, lam: float, use_context=None) -> dict:
    """RD loss with rounded latents (no noise); deterministic."""
    model.eval()
    out = model(batch, use_context=use_context, noise=False)
    return rd_loss(batch, out["x_hat"], out["likelihoods"]["y"], out["likelihoods"]["z"], lam).as_dict()


def load_images(path, min_size: int = 0) -> list[np.ndarray]:
    """RGB uint8 arrays of every image in a directory, skipping small ones."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    images = []
    for f in sorted(path.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if min(arr.shape[:2]) < min_size:
            warnings.warn(f"skipping {f.name}: smaller than {min_size}px", stacklevel=2)
            continue
        images.append(arr)
    return images


def ingest_dataset(path, crop: int, seed: int, batch_size: int = 8) -> Iterator[torch.Tensor]:
    """Endless iterator of ``(batch_size, 3, crop, crop)`` random crops in [0, 1].

    An image is drawn uniformly, then a crop origin uniformly over all valid
    positions. The sequence is fully determined by ``seed``.
    """
    images = load_images(path, crop)
    if not images:
        raise ValueError(f"no usable images of at least {crop}px in {path}")
    return _crop_stream(images, crop, seed, batch_size)


def crop_origins(rng: np.random.Generator, shape, crop: int) -> tuple[int, int]:
    h, w = shape[:2]
    return int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))


def _crop_stream(images, crop, seed, batch_size):
    rng = np.random.default_rng(seed)
    while True:
        batch = np.empty((batch_size, crop, crop, 3), dtype=np.uint8)
        for n in range(batch_size):
            img = images[int(rng.integers(len(images)))]
            r, c = crop_origins(rng, img.shape, crop)
            batch[n] = img[r : r + crop, c : c + crop]
        yield torch.from_numpy(batch).permute(0, 3, 1, 2).float().div_(255.0)


def train(
    model: DKIC,
    cfg: TrainConfig,
    out_dir=None,
    steps: int | None = None,
    batches: Iterator[torch.Tensor] | None = None,
) -> list[dict]:
    """Run the training loop; returns the per-step log records.

    Writes ``train_log.jsonl`` and ``model.npz`` (plus periodic
    ``step_XXXXXX.npz``) under ``out_dir`` when given.
    """
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    if batches is None:
        batches = ingest_dataset(cfg.dataset_path, cfg.crop, cfg.seed, cfg.batch_size)
    optimizer = make_optimizer(model, cfg)
    total = cfg.total_steps if steps is None else steps
    model.lambda_index = lambda_index(cfg.lam)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    history = []
    try:
        for step in range(total):
            lr = learning_rate(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            stats = train_step(next(batches), model, optimizer, cfg, generator)
            record = {"step": step, **stats.as_dict(), "lr": lr}
            history.append(record)
            if log_file and step % cfg.log_every == 0:
                log_file.write(json.dumps(record) + "\n")
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"step_{step + 1:06d}.npz", train_config=asdict(cfg))
            if step % 100 == 0:
                log.info("step %d loss %.4f lr %.1e", step, record["loss"], lr)
    finally:
        if log_file:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.npz", train_config=asdict(cfg), **{"lambda": cfg.lam})
    return history
