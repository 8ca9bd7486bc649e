"""The full codec network: transforms, dynamic hyper-prior and context model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .entropy_model import (
    ContextModel,
    EntropyConfig,
    FactorizedPrior,
    HyperAnalysis,
    HyperSynthesis,
    likelihood,
)
from .quantizer import round_half_away, ste_quantize, uniform_noise
from .transform import AnalysisTransform, SynthesisTransform, TransformConfig

__all__ = ["DKIC", "ModelConfig"]


@dataclass(frozen=True)
class ModelConfig:
    transform: TransformConfig = field(default_factory=TransformConfig.toy)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)

    def __post_init__(self):
        if self.transform.latent_channels != self.entropy.latent_channels:
            raise ValueError(
                f"latent_channels ({self.transform.latent_channels}) must equal the "
                f"sum of group sizes ({self.entropy.latent_channels})"
            )

    @classmethod
    def toy(cls, **entropy_kw) -> "ModelConfig":
        e = EntropyConfig(**entropy_kw)
        return cls(TransformConfig.toy(latent_channels=e.latent_channels), e)

    @classmethod
    def full(cls, **entropy_kw) -> "ModelConfig":
        e = EntropyConfig.full(**entropy_kw)
        return cls(TransformConfig.full(latent_channels=e.latent_channels), e)

    def to_dict(self) -> dict:
        return {"transform": asdict(self.transform), "entropy": asdict(self.entropy)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        t = dict(d["transform"])
        t["base_width"] = tuple(t["base_width"])
        return cls(TransformConfig(**t), EntropyConfig(**d["entropy"]))

    def replace(self, transform: dict | None = None, entropy: dict | None = None) -> "ModelConfig":
        """Copy with some fields overridden; latent width follows the group sizes."""
        e = {**asdict(self.entropy), **(entropy or {})}
        t = {**asdict(self.transform), "latent_channels": sum(e["group_sizes"]), **(transform or {})}
        return ModelConfig(TransformConfig(**t), EntropyConfig(**e))


class DKIC(nn.Module):
    """Dynamic-kernel image codec network.

    ``forward`` is the training/evaluation path: additive noise for the rate
    terms and straight-through rounding for everything fed to synthesis and
    to the context networks. Real bitstreams are produced by
    :func:`dkic.codec.compress`.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        m = cfg.transform.latent_channels
        e = cfg.entropy
        self.g_a = AnalysisTransform(cfg.transform)
        self.g_s = SynthesisTransform(cfg.transform)
        self.h_a = HyperAnalysis(m, e.hyper_channels)
        self.h_s = HyperSynthesis(
            e.hyper_channels,
            m,
            cfg.transform.kernel_side,
            e.hyper_offset_clamp,
            dynamic=e.dynamic_hyper,
        )
        self.prior = FactorizedPrior(e.hyper_channels)
        self.context = ContextModel(e)
        self.lambda_index = 255
        self.trained_steps = 0

    @property
    def schedule(self):
        return self.context.schedule

    def zero_branches(self):
        """Put every residual branch at its identity initialisation."""
        for module in self.modules():
            if module is not self and hasattr(module, "zero_branch"):
                module.zero_branch()

    def forward(
        self,
        x: torch.Tensor,
        generator: torch.Generator | None = None,
        use_context: bool | None = None,
        noise: bool = True,
    ):
        """With ``noise=False`` the rates are evaluated on the rounded latents."""
        y = self.g_a(x)
        z = self.h_a(y)
        z_hat = z + (round_half_away(z) - z).detach()
        lik_z = self.prior(z + uniform_noise(z, generator) if noise else z_hat)
        gc = self.h_s(z_hat)

        sched = self.schedule
        y_groups = [y[:, sched.channel_slice(i)] for i in range(sched.num_groups)]
        y_tilde_groups = [g + uniform_noise(g, generator) for g in y_groups] if noise else None
        lik_groups = [torch.ones_like(g) for g in y_groups]
        mu_groups = [torch.zeros_like(g) for g in y_groups]
        sigma_groups = [torch.zeros_like(g) for g in y_groups]

        def code_step(step, i, j, mu, sigma, mask):
            y_hat = ste_quantize(y_groups[i], mu)
            lik = likelihood(y_tilde_groups[i] if noise else y_hat, mu, sigma)
            lik_groups[i] = torch.where(mask, lik, lik_groups[i])
            mu_groups[i] = torch.where(mask, mu, mu_groups[i])
            sigma_groups[i] = torch.where(mask, sigma, sigma_groups[i])
            return y_hat

        y_hat = torch.cat(self.context.run(gc, code_step, use_context), dim=1)
        x_hat = self.g_s(y_hat)
        return {
            "x_hat": x_hat,
            "y": y,
            "y_hat": y_hat,
            "z": z,
            "likelihoods": {"y": torch.cat(lik_groups, dim=1), "z": lik_z},
            "mu": torch.cat(mu_groups, dim=1),
            "sigma": torch.cat(sigma_groups, dim=1),
        }
