"""Lite deformable convolution (LDCN): the dynamic kernel used by the transforms.

Each output location aggregates ``k*k`` bilinearly sampled values per channel
group. Sampling positions are the regular ``k x k`` neighbourhood shifted by
learned, content dependent offsets; the ``k*k`` samples of a group are mixed
with softmax-normalised modulation scalars shared by all channels of that
group. A pointwise projection before sampling and another after aggregation
complete the operator.

Tensor layouts used throughout::

    feature      (B, C, H, W)
    offsets      (B, G, K, 2, H, W)   last-but-two axis is (d_row, d_col), pixels
    modulations  (B, G, K, H, W)      sums to 1 over K
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "DynamicKernelConfig",
    "LDCN",
    "OffsetGenerator",
    "bilinear_sample",
    "default_groups",
    "generate_offsets_modulations",
    "kernel_grid",
    "ldcn_forward",
    "sample_bilinear",
]


def default_groups(channels: int) -> int:
    return max(1, channels // 16)


@dataclass(frozen=True)
class DynamicKernelConfig:
    channels: int
    groups: int = 1
    kernel_side: int = 3
    offset_clamp: float = 8.0
    padding_mode: str = "zero"

    def __post_init__(self):
        if self.channels <= 0 or self.groups <= 0:
            raise ValueError("channels and groups must be positive")
        if self.channels % self.groups:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by groups ({self.groups})"
            )
        if self.kernel_side <= 0 or self.kernel_side % 2 == 0:
            raise ValueError(f"kernel_side must be odd and positive, got {self.kernel_side}")
        if not (self.offset_clamp >= 0 and math.isfinite(self.offset_clamp)):
            raise ValueError("offset_clamp must be a finite nonnegative number")
        if self.padding_mode != "zero":
            raise ValueError(f"unsupported padding mode {self.padding_mode!r}")

    @property
    def points(self) -> int:
        return self.kernel_side * self.kernel_side

    @property
    def group_channels(self) -> int:
        return self.channels // self.groups

    @classmethod
    def for_channels(cls, channels: int, kernel_side: int = 3, offset_clamp: float = 8.0):
        return cls(channels, default_groups(channels), kernel_side, offset_clamp)


def bilinear_sample(feature, location) -> np.ndarray:
    """Sample ``feature`` (``(H, W)`` or ``(C, H, W)``) at a fractional ``(row, col)``.

    Grid points outside the raster read as zero.
    """
    feature = np.asarray(feature, dtype=np.float64)
    squeeze = feature.ndim == 2
    if squeeze:
        feature = feature[None]
    row, col = (float(v) for v in location)
    if not (math.isfinite(row) and math.isfinite(col)):
        raise ValueError("invalid sampling location")
    _, height, width = feature.shape
    r0, c0 = math.floor(row), math.floor(col)
    fr, fc = row - r0, col - c0
    out = np.zeros(feature.shape[0])
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            r, c = r0 + dr, c0 + dc
            if 0 <= r < height and 0 <= c < width:
                out += wr * wc * feature[:, r, c]
    return out[0] if squeeze else out


def sample_bilinear(values: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Batched zero-padded bilinear sampling.

    ``values`` is ``(N, C, H, W)``; ``rows``/``cols`` are ``(N, P)`` fractional
    pixel coordinates. Returns ``(N, C, P)``. Differentiable in all inputs.
    """
    n, c, h, w = values.shape
    p = rows.shape[1]
    flat = values.reshape(n, c, h * w)
    r0 = torch.floor(rows)
    c0 = torch.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.long()
    c0 = c0.long()
    out = values.new_zeros(n, c, p)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            idx = rr.clamp(0, h - 1) * w + cc.clamp(0, w - 1)
            picked = flat.gather(2, idx.unsqueeze(1).expand(n, c, p))
            out = out + picked * (wr * wc * valid).unsqueeze(1)
    return out


def kernel_grid(kernel_side: int) -> list[tuple[int, int]]:
    """Regular sampling offsets p_k, row-major, centred on zero."""
    r = kernel_side // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


class OffsetGenerator(nn.Module):
    """Two depth-wise branches producing offsets and modulation logits.

    The pointwise heads start at zero, so a fresh generator yields zero
    offsets and uniform ``1/K`` modulations.
    """

    def __init__(self, cfg: DynamicKernelConfig):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.channels, cfg.kernel_side
        self.offset_dw = nn.Conv2d(c, c, k, padding=k // 2, groups=c)
        self.offset_head = nn.Conv2d(c, cfg.groups * cfg.points * 2, 1)
        self.mod_dw = nn.Conv2d(c, c, k, padding=k // 2, groups=c)
        self.mod_head = nn.Conv2d(c, cfg.groups * cfg.points, 1)
        for head in (self.offset_head, self.mod_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw (unclamped) offsets and modulation logits."""
        b, _, h, w = x.shape
        g, k = self.cfg.groups, self.cfg.points
        raw_off = self.offset_head(F.gelu(self.offset_dw(x))).view(b, g, k, 2, h, w)
        raw_mod = self.mod_head(F.gelu(self.mod_dw(x))).view(b, g, k, h, w)
        return raw_off, raw_mod

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw_off, raw_mod = self.logits(x)
        bound = self.cfg.offset_clamp
        return raw_off.clamp(-bound, bound), torch.softmax(raw_mod, dim=2)


def generate_offsets_modulations(
    feature: torch.Tensor, generator: OffsetGenerator, cfg: DynamicKernelConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    if feature.ndim != 4 or feature.shape[1] != cfg.channels or generator.cfg != cfg:
        raise ValueError("config/feature mismatch")
    return generator(feature)


def _project(x: torch.Tensor, proj) -> torch.Tensor:
    if proj is None:
        return x
    weight, bias = proj
    return F.conv2d(x, weight.reshape(weight.shape[0], weight.shape[1], 1, 1), bias)


def ldcn_forward(
    feature: torch.Tensor,
    offsets: torch.Tensor,
    modulations: torch.Tensor,
    input_proj=None,
    output_proj=None,
    *,
    kernel_side: int = 3,
    check: bool = True,
) -> torch.Tensor:
    """Evaluate the LDCN aggregation.

    ``input_proj``/``output_proj`` are ``(weight (C, C), bias (C,))`` pairs or
    ``None`` for identity. The group count and point count are read off the
    offset tensor.
    """
    b, c, h, w = feature.shape
    if offsets.ndim != 6 or modulations.ndim != 5:
        raise ValueError("malformed modulation/offset field")
    g, k = offsets.shape[1], offsets.shape[2]
    if (
        k != kernel_side * kernel_side
        or c % g
        or tuple(offsets.shape) != (b, g, k, 2, h, w)
        or tuple(modulations.shape) != (b, g, k, h, w)
    ):
        raise ValueError("malformed modulation/offset field")
    if check:
        with torch.no_grad():
            sums = modulations.sum(dim=2)
            bad = (
                not torch.isfinite(offsets).all()
                or (modulations < 0).any()
                or (sums - 1).abs().max() > 1e-4
            )
        if bad:
            raise ValueError("malformed modulation/offset field")

    values = _project(feature, input_proj).reshape(b * g, c // g, h, w)
    grid = torch.tensor(kernel_grid(kernel_side), dtype=feature.dtype, device=feature.device)
    base_r = torch.arange(h, dtype=feature.dtype, device=feature.device).view(1, 1, h, 1)
    base_c = torch.arange(w, dtype=feature.dtype, device=feature.device).view(1, 1, 1, w)
    rows = base_r + grid[:, 0].view(1, k, 1, 1) + offsets[:, :, :, 0]
    cols = base_c + grid[:, 1].view(1, k, 1, 1) + offsets[:, :, :, 1]
    sampled = sample_bilinear(
        values, rows.reshape(b * g, k * h * w), cols.reshape(b * g, k * h * w)
    ).view(b * g, c // g, k, h, w)
    agg = (sampled * modulations.reshape(b * g, 1, k, h, w)).sum(dim=2)
    return _project(agg.reshape(b, c, h, w), output_proj)


class LDCN(nn.Module):
    """Lite deformable convolution with group-shared modulated weights."""

    def __init__(self, cfg: DynamicKernelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.channels, cfg.channels)
        self.output_proj = nn.Linear(cfg.channels, cfg.channels)
        self.generator = OffsetGenerator(cfg)

    def sampling_fields(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return generate_offsets_modulations(x, self.generator, self.cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        offsets, modulations = self.sampling_fields(x)
        return ldcn_forward(
            x,
            offsets,
            modulations,
            (self.input_proj.weight, self.input_proj.bias),
            (self.output_proj.weight, self.output_proj.bias),
            kernel_side=self.cfg.kernel_side,
            check=False,
        )
