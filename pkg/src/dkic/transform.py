"""Analysis and synthesis transforms built from dynamic residual blocks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .dynamic_kernel import LDCN, DynamicKernelConfig, default_groups

__all__ = [
    "DRB",
    "DRBG",
    "MLP",
    "RBB",
    "AnalysisTransform",
    "ChannelLayerNorm",
    "SynthesisTransform",
    "TransformConfig",
    "conv",
    "deconv",
]


def conv(cin: int, cout: int, kernel_size: int = 5, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(cin: int, cout: int, kernel_size: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        cin,
        cout,
        kernel_size,
        stride=stride,
        padding=kernel_size // 2,
        output_padding=stride - 1,
    )


@dataclass(frozen=True)
class TransformConfig:
    base_width: tuple[int, ...] = (16, 24, 32, 32)
    latent_channels: int = 40
    drbg_per_stage: int = 1
    rbb_bottleneck_ratio: float = 0.5
    mlp_ratio: float = 2.0
    kernel_side: int = 3
    offset_clamp: float = 4.0
    scale_preset: str = "toy"
    block_kind: str = "drbg"

    def __post_init__(self):
        object.__setattr__(self, "base_width", tuple(int(w) for w in self.base_width))
        if len(self.base_width) != 4:
            raise ValueError("base_width must list 4 stage widths")
        if min(self.base_width) <= 0 or self.latent_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.drbg_per_stage < 0:
            raise ValueError("drbg_per_stage must be nonnegative")
        if not 0 < self.rbb_bottleneck_ratio:
            raise ValueError("rbb_bottleneck_ratio must be positive")
        if self.block_kind not in ("drbg", "rbb"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if self.scale_preset not in ("full", "toy", "custom"):
            raise ValueError(f"unknown scale preset {self.scale_preset!r}")

    @classmethod
    def full(cls, **kw) -> "TransformConfig":
        kw.setdefault("offset_clamp", 8.0)
        kw.setdefault("latent_channels", 320)
        return cls(base_width=(192, 192, 192, 192), drbg_per_stage=2, scale_preset="full", **kw)

    @classmethod
    def toy(cls, **kw) -> "TransformConfig":
        return cls(scale_preset="toy", **kw)

    def kernel_config(self, channels: int) -> DynamicKernelConfig:
        return DynamicKernelConfig(
            channels, default_groups(channels), self.kernel_side, self.offset_clamp
        )


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class MLP(nn.Module):
    """1x1 conv -> GELU -> 1x1 conv."""

    def __init__(self, channels: int, ratio: float = 2.0):
        super().__init__()
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.fc1.in_channels:
            raise ValueError(
                f"MLP expects {self.fc1.in_channels} channels, got {x.shape[1]}"
            )
        return self.fc2(F.gelu(self.fc1(x)))

    def zero_branch(self):
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)


class DRB(nn.Module):
    """Dynamic residual block with the norm behind each branch (post-norm).

    ``x <- x + LN(LDCN(x))``, then ``x <- x + LN(MLP(x))``.
    """

    def __init__(self, cfg: DynamicKernelConfig, mlp_ratio: float = 2.0):
        super().__init__()
        self.ldcn = LDCN(cfg)
        self.norm1 = ChannelLayerNorm(cfg.channels)
        self.mlp = MLP(cfg.channels, mlp_ratio)
        self.norm2 = ChannelLayerNorm(cfg.channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.norm1(self.ldcn(x))
        return x + self.norm2(self.mlp(x))

    def zero_branch(self):
        """Zero both branch outputs so the block is the identity map."""
        nn.init.zeros_(self.ldcn.output_proj.weight)
        nn.init.zeros_(self.ldcn.output_proj.bias)
        self.mlp.zero_branch()
        # LN of an all-zero branch is its bias, so that must vanish too
        nn.init.zeros_(self.norm1.norm.bias)
        nn.init.zeros_(self.norm2.norm.bias)


class RBB(nn.Module):
    """Residual bottleneck block: 1x1 reduce, 3x3, 1x1 expand, GELU between."""

    def __init__(self, channels: int, ratio: float = 0.5):
        super().__init__()
        mid = max(1, int(round(channels * ratio)))
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.spatial = nn.Conv2d(mid, mid, 3, padding=1)
        self.expand = nn.Conv2d(mid, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.reduce.in_channels:
            raise ValueError(
                f"RBB expects {self.reduce.in_channels} channels, got {x.shape[1]}"
            )
        out = F.gelu(self.reduce(x))
        out = F.gelu(self.spatial(out))
        return x + self.expand(out)

    def zero_branch(self):
        nn.init.zeros_(self.expand.weight)
        nn.init.zeros_(self.expand.bias)


class DRBG(nn.Module):
    """DRB followed by RBB."""

    def __init__(self, cfg: DynamicKernelConfig, mlp_ratio: float = 2.0, rbb_ratio: float = 0.5):
        super().__init__()
        self.drb = DRB(cfg, mlp_ratio)
        self.rbb = RBB(cfg.channels, rbb_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.rbb(self.drb(x))

    def zero_branch(self):
        self.drb.zero_branch()
        self.rbb.zero_branch()


def _stage_blocks(cfg: TransformConfig, channels: int) -> list[nn.Module]:
    # block_kind "rbb" is the "replace DRB with RBB" ablation
    if cfg.block_kind == "rbb":
        return [RBB(channels, cfg.rbb_bottleneck_ratio) for _ in range(cfg.drbg_per_stage)]
    return [
        DRBG(cfg.kernel_config(channels), cfg.mlp_ratio, cfg.rbb_bottleneck_ratio)
        for _ in range(cfg.drbg_per_stage)
    ]


class AnalysisTransform(nn.Module):
    """x -> y: four stride-2 stages, each followed by DRBGs, then a 3x3 head."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        prev = 3
        for width in cfg.base_width:
            layers.append(conv(prev, width, 5, 2))
            layers.extend(_stage_blocks(cfg, width))
            prev = width
        layers.append(conv(prev, cfg.latent_channels, 3, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image batch, got {tuple(x.shape)}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ValueError("unpadded input")
        return self.layers(x)


class SynthesisTransform(nn.Module):
    """y_hat -> x_hat, mirroring the analysis transform."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.base_width
        layers: list[nn.Module] = [conv(cfg.latent_channels, widths[-1], 3, 1)]
        for i in reversed(range(4)):
            layers.extend(_stage_blocks(cfg, widths[i]))
            layers.append(deconv(widths[i], widths[i - 1] if i else 3, 5, 2))
        self.layers = nn.Sequential(*layers)

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.ndim != 4 or y_hat.shape[1] != self.cfg.latent_channels:
            raise ValueError(
                f"expected {self.cfg.latent_channels} latent channels, got {tuple(y_hat.shape)}"
            )
        return self.layers(y_hat)
