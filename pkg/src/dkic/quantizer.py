"""Mean-centred quantisation: noise proxy for training, rounding for coding."""

from __future__ import annotations

from enum import Enum

import torch

__all__ = [
    "QuantMode",
    "dequantize_symbols",
    "extract_symbols",
    "quantize",
    "round_half_away",
    "ste_quantize",
    "uniform_noise",
]


class QuantMode(str, Enum):
    TRAIN_NOISE = "train_noise"
    INFER_ROUND = "infer_round"


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def uniform_noise(like: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(like.shape, generator=generator, dtype=like.dtype, device=like.device)
    # rand is in [0, 1); keep the draw strictly inside (-1/2, 1/2)
    return (u - 0.5).clamp_(-0.5 + 1e-7, 0.5 - 1e-7)


def _check(y: torch.Tensor, mu) -> None:
    if isinstance(mu, torch.Tensor) and mu.shape != y.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs mu {tuple(mu.shape)}")


def quantize(
    y: torch.Tensor,
    mu: torch.Tensor,
    mode: QuantMode | str = QuantMode.INFER_ROUND,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """``round(y - mu) + mu`` in inference mode, ``y + U(-1/2, 1/2)`` in training mode."""
    _check(y, mu)
    mode = QuantMode(mode)
    if mode is QuantMode.TRAIN_NOISE:
        return y + uniform_noise(y, generator)
    return round_half_away(y - mu) + mu


def ste_quantize(y: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Rounded value in the forward pass, identity gradient w.r.t. ``y``."""
    _check(y, mu)
    return y + (round_half_away(y - mu) + mu - y).detach()


def extract_symbols(y: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    _check(y, mu)
    return round_half_away(y - mu).to(torch.int64)


def dequantize_symbols(symbols: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    return symbols.to(mu.dtype) + mu
