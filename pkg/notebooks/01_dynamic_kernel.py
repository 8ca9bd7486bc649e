# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: dkic
#     language: python
#     name: python3
# ---

# %% [markdown]
# # The dynamic-kernel layer
#
# A dynamic-kernel layer (LDCN) replaces the fixed sampling grid of a
# convolution with per-location offsets and per-point weights, both
# predicted from the input. Each channel group reads `K = k*k` bilinear
# samples around every position, weights them with a softmax over the K
# points, and a pointwise projection mixes the groups.
#
# This script checks three things by hand:
#
# 1. with zero offsets and uniform weights the layer is a zero-padded box filter;
# 2. a nonzero offset field moves the samples exactly where bilinear
#    interpolation says it should;
# 3. the offset clamp bounds how far a sample can travel.

# %%
import numpy as np
import torch

from dkic.dynamic_kernel import LDCN, DynamicKernelConfig, bilinear_sample, kernel_grid, ldcn_forward

torch.manual_seed(0)

# %% [markdown]
# ## Zero offsets give a box filter

# %%
k = 3
x = torch.randn(1, 4, 6, 6, dtype=torch.float64)
off = torch.zeros(1, 2, k * k, 2, 6, 6, dtype=torch.float64)
mod = torch.full((1, 2, k * k, 6, 6), 1 / (k * k), dtype=torch.float64)
out = ldcn_forward(x, off, mod, kernel_side=k)

padded = np.pad(x[0].numpy(), ((0, 0), (1, 1), (1, 1)))
box = sum(padded[:, 1 + dy : 7 + dy, 1 + dx : 7 + dx] for dy, dx in kernel_grid(k)) / (k * k)
print("max |LDCN - box filter| =", float(np.abs(out[0].numpy() - box).max()))

# %% [markdown]
# ## A single shifted sample
#
# Put all weight on the centre point of group 0 and shift it by (0.25, 0.75).
# The output at (2, 2) is then the bilinear read at (2.25, 2.75).

# %%
off = torch.zeros(1, 1, 9, 2, 6, 6, dtype=torch.float64)
off[0, 0, 4, 0] = 0.25
off[0, 0, 4, 1] = 0.75
mod = torch.zeros(1, 1, 9, 6, 6, dtype=torch.float64)
mod[0, 0, 4] = 1.0
y = ldcn_forward(x[:, :2], off, mod)
print("layer:   ", y[0, :, 2, 2].numpy())
print("by hand: ", bilinear_sample(x[0, :2].numpy(), (2.25, 2.75)))

# %% [markdown]
# ## The clamp
#
# With large random generator weights the raw offsets explode; the clamp
# keeps every component inside `[-offset_clamp, offset_clamp]`.

# %%
layer = LDCN(DynamicKernelConfig(8, 2, 3, offset_clamp=1.5))
for p in layer.generator.parameters():
    torch.nn.init.normal_(p, std=4.0)
with torch.no_grad():
    offsets, weights = layer.sampling_fields(torch.randn(1, 8, 10, 10))
print("largest |offset|:", float(offsets.abs().max()), "(clamp 1.5)")
print("weights sum to one:", bool(torch.allclose(weights.sum(2), torch.ones(1))))
