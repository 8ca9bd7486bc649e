"""Coarse-to-fine entropy model driven by a declarative coding schedule.

The latent ``y`` is split along channels into ``N`` groups; group ``i`` is
further split spatially into ``K_i`` stages. Each (group, stage) pair is one
autoregressive step. Gaussian parameters for a step come from three
contexts: the global context ``gc`` (hyper-prior), the channel context
``cc`` (groups decoded before ``i``) and the spatial context ``sc`` (earlier
stages of group ``i``).

Steps and stages are 0-based in code; ``stage_mask`` takes the 1-based
stage index used in the schedule notation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dynamic_kernel import DynamicKernelConfig, default_groups
from .range_coder import TAIL_MASS, CdfTable, table_from_pmf
from .transform import DRB, conv, deconv

__all__ = [
    "ASYMMETRIC_SCHEDULE",
    "LIKELIHOOD_FLOOR",
    "SIGMA_MIN",
    "ChannelContext",
    "CodingSchedule",
    "ContextModel",
    "EntropyConfig",
    "EntropyParameters",
    "FactorizedPrior",
    "HyperAnalysis",
    "HyperSynthesis",
    "SpatialContext",
    "build_schedule",
    "channel_context",
    "entropy_parameters",
    "factorized_cdf",
    "gaussian_likelihood",
    "likelihood",
    "readable_elements",
    "spatial_context",
    "stage_mask",
]

SIGMA_MIN = 0.11
LIKELIHOOD_FLOOR = 1e-9
SUPPORTED_STAGES = (1, 2, 4)

# 2x2 phase order for four-stage coding: diagonal first
_PHASES = ((0, 0), (1, 1), (0, 1), (1, 0))


@dataclass(frozen=True)
class CodingSchedule:
    group_sizes: tuple[int, ...]
    stage_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(g) for g in self.group_sizes))
        object.__setattr__(self, "stage_counts", tuple(int(k) for k in self.stage_counts))
        if len(self.group_sizes) != len(self.stage_counts) or not self.group_sizes:
            raise ValueError("group_sizes and stage_counts must be non-empty and of equal length")
        if min(self.group_sizes) <= 0:
            raise ValueError("group sizes must be positive")
        bad = [k for k in self.stage_counts if k not in SUPPORTED_STAGES]
        if bad:
            raise ValueError(f"unsupported stage count(s) {bad}; allowed {SUPPORTED_STAGES}")

    @property
    def num_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def latent_channels(self) -> int:
        return sum(self.group_sizes)

    @property
    def steps(self) -> list[tuple[int, int]]:
        return [(i, j) for i, k in enumerate(self.stage_counts) for j in range(k)]

    @property
    def num_steps(self) -> int:
        return sum(self.stage_counts)

    def channel_slice(self, i: int) -> slice:
        start = sum(self.group_sizes[:i])
        return slice(start, start + self.group_sizes[i])


def build_schedule(group_sizes: Sequence[int], stage_counts: Sequence[int]) -> CodingSchedule:
    return CodingSchedule(tuple(group_sizes), tuple(stage_counts))


# groups [16, 16, 32, 64, 192], four-stage spatial context for the first two
ASYMMETRIC_SCHEDULE = build_schedule([16, 16, 32, 64, 192], [4, 4, 2, 2, 2])


def stage_mask(stage: int, stage_count: int, height: int, width: int) -> torch.Tensor:
    """Boolean ``(height, width)`` mask of the positions coded at 1-based ``stage``."""
    if stage_count not in SUPPORTED_STAGES or not 1 <= stage <= stage_count:
        raise ValueError(f"invalid stage {stage} of {stage_count}")
    h = torch.arange(height).view(-1, 1)
    w = torch.arange(width).view(1, -1)
    if stage_count == 1:
        return torch.ones(height, width, dtype=torch.bool)
    if stage_count == 2:
        even = (h + w) % 2 == 0
        return even if stage == 1 else ~even
    ph, pw = _PHASES[stage - 1]
    return (h % 2 == ph) & (w % 2 == pw)


def decoded_mask(stage: int, stage_count: int, height: int, width: int) -> torch.Tensor:
    """Union of the masks of stages strictly before 1-based ``stage``."""
    out = torch.zeros(height, width, dtype=torch.bool)
    for s in range(1, stage):
        out |= stage_mask(s, stage_count, height, width)
    return out


def readable_elements(
    schedule: CodingSchedule, step: int, height: int, width: int
) -> set[tuple[int, int, int]]:
    """Latent elements ``(channel, h, w)`` already decoded when ``step`` starts."""
    out = set()
    for i, j in schedule.steps[:step]:
        m = stage_mask(j + 1, schedule.stage_counts[i], height, width)
        hs, ws = torch.nonzero(m, as_tuple=True)
        for c in range(schedule.channel_slice(i).start, schedule.channel_slice(i).stop):
            out.update((c, int(a), int(b)) for a, b in zip(hs, ws))
    return out


# ---------------------------------------------------------------------------
# likelihoods


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        # let gradients through when they push the value back above the bound
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def _std_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2**-0.5))


def gaussian_likelihood(values: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Unfloored probability of the unit bin around ``values`` under N(mu, sigma^2)."""
    d = torch.abs(values - mu)
    return _std_cdf((0.5 - d) / sigma) - _std_cdf((-0.5 - d) / sigma)


def likelihood(values: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Bin probability floored at ``LIKELIHOOD_FLOOR`` for rate computation."""
    return lower_bound(gaussian_likelihood(values, mu, sigma), LIKELIHOOD_FLOOR)


# ---------------------------------------------------------------------------
# hyper-prior


class HyperAnalysis(nn.Module):
    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        self.latent_channels = latent_channels
        self.layers = nn.Sequential(
            conv(latent_channels, hyper_channels, 3, 1),
            nn.GELU(),
            conv(hyper_channels, hyper_channels, 5, 2),
            nn.GELU(),
            conv(hyper_channels, hyper_channels, 5, 2),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 4 or y.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {tuple(y.shape)}")
        if y.shape[2] % 4 or y.shape[3] % 4:
            raise ValueError("latent dims must be divisible by 4")
        return self.layers(y)


class HyperSynthesis(nn.Module):
    """Two upsampling stages with a dynamic residual block between them."""

    def __init__(
        self,
        hyper_channels: int,
        latent_channels: int,
        kernel_side: int = 3,
        offset_clamp: float = 2.0,
        dynamic: bool = True,
    ):
        super().__init__()
        self.hyper_channels = hyper_channels
        self.up1 = deconv(hyper_channels, hyper_channels, 5, 2)
        self.drb = (
            DRB(DynamicKernelConfig(hyper_channels, default_groups(hyper_channels), kernel_side, offset_clamp))
            if dynamic
            else nn.Identity()
        )
        self.up2 = deconv(hyper_channels, 2 * latent_channels, 5, 2)

    def forward(self, z_hat: torch.Tensor) -> torch.Tensor:
        if z_hat.ndim != 4 or z_hat.shape[1] != self.hyper_channels:
            raise ValueError(f"expected {self.hyper_channels} hyper channels, got {tuple(z_hat.shape)}")
        return self.up2(self.drb(F.gelu(self.up1(z_hat))))


class FactorizedPrior(nn.Module):
    """Per-channel non-parametric density for the side information.

    The cumulative is ``sigmoid(f_c(v))`` where ``f_c`` is a monotone chain of
    positive-weight affine maps with bounded ``tanh`` gates.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, values: torch.Tensor, dtype=None) -> torch.Tensor:
        """``values`` is ``(C, 1, N)``; returns the cumulative logits, same shape."""
        dtype = dtype or values.dtype
        logits = values.to(dtype)
        for i, (matrix, bias) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(matrix.to(dtype)), logits) + bias.to(dtype)
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i].to(dtype)) * torch.tanh(logits)
        return logits

    def _per_channel(self, z: torch.Tensor) -> tuple[torch.Tensor, Callable]:
        c = z.shape[1]
        flat = z.transpose(0, 1).reshape(c, 1, -1)

        def restore(t):
            return t.reshape(c, z.shape[0], *z.shape[2:]).transpose(0, 1)

        return flat, restore

    def cdf(self, z: torch.Tensor) -> torch.Tensor:
        flat, restore = self._per_channel(z)
        return restore(torch.sigmoid(self.logits_cumulative(flat)))

    def bin_probability(self, z: torch.Tensor, dtype=None) -> torch.Tensor:
        flat, restore = self._per_channel(z)
        lower = self.logits_cumulative(flat - 0.5, dtype)
        upper = self.logits_cumulative(flat + 0.5, dtype)
        # evaluate in the tail where the sigmoid is not saturated
        sign = -torch.sign(lower + upper).detach()
        return restore(torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {z.shape[1]}")
        return lower_bound(self.bin_probability(z), LIKELIHOOD_FLOOR)

    @torch.no_grad()
    def quantiles(self, tail_mass: float = TAIL_MASS) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel values where the cumulative reaches ``tail_mass/2`` and ``1 - tail_mass/2``."""
        target = math.log(tail_mass / 2) - math.log1p(-tail_mass / 2)  # logit(tail/2)
        out = []
        for goal in (target, -target):
            lo = torch.full((self.channels, 1, 1), -1.0, dtype=torch.float64)
            hi = torch.full((self.channels, 1, 1), 1.0, dtype=torch.float64)
            for _ in range(64):
                low_bad = self.logits_cumulative(lo, torch.float64) > goal
                high_bad = self.logits_cumulative(hi, torch.float64) < goal
                if not (low_bad.any() or high_bad.any()):
                    break
                lo = torch.where(low_bad, lo * 2, lo)
                hi = torch.where(high_bad, hi * 2, hi)
            for _ in range(80):
                mid = (lo + hi) / 2
                above = self.logits_cumulative(mid, torch.float64) > goal
                hi = torch.where(above, mid, hi)
                lo = torch.where(above, lo, mid)
            out.append(((lo + hi) / 2).flatten().numpy())
        return out[0], out[1]

    @torch.no_grad()
    def support(self, tail_mass: float = TAIL_MASS) -> tuple[np.ndarray, np.ndarray]:
        qlo, qhi = self.quantiles(tail_mass)
        return np.floor(qlo).astype(np.int64), np.ceil(qhi).astype(np.int64)

    @torch.no_grad()
    def cdf_tables(self, precision_bits: int = 16, tail_mass: float = TAIL_MASS) -> list[CdfTable]:
        lo, hi = self.support(tail_mass)
        tables = []
        for c in range(self.channels):
            v = torch.arange(int(lo[c]), int(hi[c]) + 1, dtype=torch.float64).view(1, 1, -1)
            pmf = self.bin_probability_channel(c, v)
            tables.append(table_from_pmf(pmf, int(lo[c]), precision_bits))
        return tables

    @torch.no_grad()
    def bin_probability_channel(self, channel: int, values: torch.Tensor) -> np.ndarray:
        z = torch.zeros(1, self.channels, values.numel(), dtype=torch.float64)
        z[0, channel] = values.flatten()
        p = self.bin_probability(z.unsqueeze(-1), torch.float64)
        return p[0, channel].flatten().numpy()


def factorized_cdf(channel: int, value, prior: FactorizedPrior) -> np.ndarray:
    """Cumulative probability of the side-information density at ``value``."""
    v = torch.as_tensor(np.atleast_1d(np.asarray(value, dtype=np.float64)))
    z = torch.zeros(prior.channels, 1, v.numel(), dtype=torch.float64)
    z[:, 0] = v
    with torch.no_grad():
        logits = prior.logits_cumulative(z, torch.float64)[channel, 0]
    out = torch.sigmoid(logits).numpy()
    return out if np.ndim(value) else out[0]


# ---------------------------------------------------------------------------
# context networks


@dataclass(frozen=True)
class EntropyConfig:
    group_sizes: tuple[int, ...] = (2, 2, 4, 8, 24)
    stage_counts: tuple[int, ...] = (4, 4, 2, 2, 2)
    hyper_channels: int = 24
    context_channels: int = 32
    ep_hidden: int = 64
    use_context: bool = True
    dynamic_hyper: bool = True
    hyper_offset_clamp: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(g) for g in self.group_sizes))
        object.__setattr__(self, "stage_counts", tuple(int(k) for k in self.stage_counts))
        build_schedule(self.group_sizes, self.stage_counts)

    @property
    def schedule(self) -> CodingSchedule:
        return build_schedule(self.group_sizes, self.stage_counts)

    @property
    def latent_channels(self) -> int:
        return sum(self.group_sizes)

    @classmethod
    def full(cls, **kw) -> "EntropyConfig":
        kw.setdefault("group_sizes", ASYMMETRIC_SCHEDULE.group_sizes)
        kw.setdefault("stage_counts", ASYMMETRIC_SCHEDULE.stage_counts)
        kw.setdefault("hyper_channels", 192)
        kw.setdefault("context_channels", 128)
        kw.setdefault("ep_hidden", 320)
        kw.setdefault("hyper_offset_clamp", 4.0)
        return cls(**kw)


class ChannelContext(nn.Module):
    """Channel context from the groups decoded before the current one."""

    def __init__(self, schedule: CodingSchedule, out_channels: int):
        super().__init__()
        self.schedule = schedule
        m = schedule.latent_channels
        self.null = nn.Parameter(torch.zeros(1, out_channels, 1, 1))
        self.nets = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(m, out_channels, 3, padding=1),
                nn.GELU(),
                nn.Conv2d(out_channels, out_channels, 3, padding=1),
            )
            for _ in range(schedule.num_groups - 1)
        )

    def null_context(self, like: torch.Tensor) -> torch.Tensor:
        b, _, h, w = like.shape
        return self.null.expand(b, -1, h, w)

    def forward(self, decoded: Sequence[torch.Tensor], group: int, like: torch.Tensor) -> torch.Tensor:
        if group == 0:
            return self.null_context(like)
        b, _, h, w = like.shape
        filled = sum(self.schedule.group_sizes[:group])
        pad = like.new_zeros(b, self.schedule.latent_channels - filled, h, w)
        return self.nets[group - 1](torch.cat([*decoded[:group], pad], dim=1))


class SpatialContext(nn.Module):
    """Spatial context from earlier stages of the current group (5x5 aggregation)."""

    def __init__(self, schedule: CodingSchedule, out_channels: int):
        super().__init__()
        self.schedule = schedule
        self.null = nn.Parameter(torch.zeros(schedule.num_groups, out_channels, 1, 1))
        self.nets = nn.ModuleDict()
        for i, (size, k) in enumerate(zip(schedule.group_sizes, schedule.stage_counts)):
            for j in range(1, k):
                self.nets[f"{i}_{j}"] = nn.Sequential(
                    nn.Conv2d(size, out_channels, 5, padding=2),
                    nn.GELU(),
                    nn.Conv2d(out_channels, out_channels, 1),
                )

    def null_context(self, group: int, like: torch.Tensor) -> torch.Tensor:
        b, _, h, w = like.shape
        return self.null[group].unsqueeze(0).expand(b, -1, h, w)

    def forward(self, current: torch.Tensor, group: int, stage: int) -> torch.Tensor:
        if stage == 0:
            return self.null_context(group, current)
        _, _, h, w = current.shape
        visible = decoded_mask(stage + 1, self.schedule.stage_counts[group], h, w).to(current.device)
        return self.nets[f"{group}_{stage}"](current * visible)


class EntropyParameters(nn.Module):
    """1x1 conv stacks mapping (gc, cc, sc) to per-group (mu, sigma)."""

    def __init__(self, schedule: CodingSchedule, gc_channels: int, ctx_channels: int, hidden: int):
        super().__init__()
        cin = gc_channels + 2 * ctx_channels
        self.nets = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, hidden, 1),
                nn.GELU(),
                nn.Conv2d(hidden, hidden, 1),
                nn.GELU(),
                nn.Conv2d(hidden, 2 * size, 1),
            )
            for size in schedule.group_sizes
        )

    def forward(self, gc, cc, sc, group: int) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.nets[group](torch.cat([gc, cc, sc], dim=1))
        mu, raw = out.chunk(2, dim=1)
        return mu, lower_bound(F.softplus(raw), SIGMA_MIN)


# one coding step: (step, group, stage, mu, sigma, mask) -> y_hat for the group
StepFn = Callable[[int, int, int, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class ContextModel(nn.Module):
    """Runs the autoregressive schedule; the caller decides how each step is coded."""

    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        self.cfg = cfg
        self.schedule = cfg.schedule
        m = self.schedule.latent_channels
        self.channel = ChannelContext(self.schedule, cfg.context_channels)
        self.spatial = SpatialContext(self.schedule, cfg.context_channels)
        self.params = EntropyParameters(self.schedule, 2 * m, cfg.context_channels, cfg.ep_hidden)

    def step_parameters(self, gc, decoded, group, stage, use_context=None):
        use_context = self.cfg.use_context if use_context is None else use_context
        if use_context:
            cc = self.channel(decoded, group, gc)
            sc = self.spatial(decoded[group], group, stage)
        else:
            cc = self.channel.null_context(gc)
            sc = self.spatial.null_context(group, gc)
        return self.params(gc, cc, sc, group)

    def run(self, gc: torch.Tensor, code_step: StepFn, use_context=None) -> list[torch.Tensor]:
        """Walk the schedule; returns the decoded latent as a list of group tensors."""
        b, _, h, w = gc.shape
        sched = self.schedule
        decoded = [gc.new_zeros(b, size, h, w) for size in sched.group_sizes]
        for step, (i, j) in enumerate(sched.steps):
            mu, sigma = self.step_parameters(gc, decoded, i, j, use_context)
            mask = stage_mask(j + 1, sched.stage_counts[i], h, w).to(gc.device)
            values = code_step(step, i, j, mu, sigma, mask)
            decoded[i] = torch.where(mask, values, decoded[i])
        return decoded


def channel_context(
    decoded_slices: Sequence[torch.Tensor], model: ContextModel, group: int, like: torch.Tensor
) -> torch.Tensor:
    sched = model.schedule
    if len(decoded_slices) != group or any(
        s.shape[1] != sched.group_sizes[n] for n, s in enumerate(decoded_slices)
    ):
        raise ValueError("slice/schedule mismatch")
    return model.channel(list(decoded_slices), group, like)


def spatial_context(
    decoded_parts: torch.Tensor, model: ContextModel, group: int, stage: int
) -> torch.Tensor:
    """``stage`` is 1-based here; positions at stages >= ``stage`` must be zero."""
    k = model.schedule.stage_counts[group]
    if decoded_parts.shape[1] != model.schedule.group_sizes[group]:
        raise ValueError("slice/schedule mismatch")
    _, _, h, w = decoded_parts.shape
    hidden = ~decoded_mask(stage, k, h, w)
    if (decoded_parts[..., hidden] != 0).any():
        raise ValueError("mask violation")
    return model.spatial(decoded_parts, group, stage - 1)


def entropy_parameters(gc, cc, sc, group: int, model: ContextModel):
    if not (gc.shape[2:] == cc.shape[2:] == sc.shape[2:]):
        raise ValueError("context bundle shapes are inconsistent")
    return model.params(gc, cc, sc, group)
