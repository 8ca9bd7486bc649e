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
# # Training a toy codec and looking inside it
#
# A desk-scale model (latent 40, groups 2/2/4/8/24) is trained on crops of
# the scikit-image sample photographs. We then
#
# * code held-out crops for real and compare the stream size with the
#   model's own rate estimate,
# * switch the context networks off to see how much they save,
# * look at per-group latent magnitudes, and
# * dump the learned sampling locations of the first dynamic-kernel layer.
#
# `DKIC_NOTEBOOK_STEPS` sets the number of training steps (default 300, about
# a minute and a half on one CPU core). The acceptance suite uses 2016.

# %%
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from skimage import data

from dkic import DKIC, ModelConfig, compress, pack_bitstream
from dkic.codec import pad_image
from dkic.dynamic_kernel import kernel_grid
from dkic.evaluation import latent_group_stats, visualize_offsets
from dkic.training import TrainConfig, evaluate_loss, ingest_dataset, train

STEPS = int(os.environ.get("DKIC_NOTEBOOK_STEPS", 300))
work = Path(tempfile.mkdtemp(prefix="dkic_nb_"))

# %% [markdown]
# ## Data

# %%
train_dir = work / "train"
train_dir.mkdir()
for name in ("astronaut", "coffee", "hubble_deep_field", "immunohistochemistry", "retina"):
    Image.fromarray(getattr(data, name)()).save(train_dir / f"{name}.png")

rng = np.random.default_rng(0)
val = []
for src in (data.rocket(), data.chelsea()):
    for _ in range(3):
        r, c = rng.integers(0, src.shape[0] - 128), rng.integers(0, src.shape[1] - 128)
        val.append(torch.from_numpy(np.ascontiguousarray(src[r : r + 128, c : c + 128])).permute(2, 0, 1).float() / 255)
val_batch = torch.stack(val)

# %% [markdown]
# ## Training

# %%
cfg = TrainConfig.toy()
torch.manual_seed(0)
model = DKIC(ModelConfig.toy())
history = train(model, cfg, steps=STEPS, batches=ingest_dataset(train_dir, cfg.crop, cfg.seed, cfg.batch_size))
losses = np.array([h["loss"] for h in history])
for start in range(0, len(losses), max(1, len(losses) // 6)):
    print(f"steps {start:4d}+  mean loss {losses[start : start + 50].mean():8.3f}")

# %% [markdown]
# ## Real coding against the rate estimate

# %%
model.eval()
for x in val[:3]:
    b = compress(x, model)
    with torch.no_grad():
        out = model(pad_image(x)[0][None], noise=False)
    ideal = sum(float(-torch.log2(v).sum()) for v in out["likelihoods"].values())
    print(f"coded {8 * b.payload_bytes:6d} bits   estimate {ideal:8.1f} bits   container {len(pack_bitstream(b))} bytes")

# %% [markdown]
# ## What the contexts buy

# %%
with torch.no_grad():
    for use_context in (True, False):
        out = model(val_batch, noise=False, use_context=use_context)
        bpp = float(-torch.log2(out["likelihoods"]["y"]).sum()) / val_batch[:, 0].numel()
        print(f"contexts {'on ' if use_context else 'off'}: {bpp:.4f} bpp for y")
print("validation loss:", evaluate_loss(model, val_batch, cfg.lam))

# %% [markdown]
# ## Per-group latent statistics
#
# Early groups are coded with the least context. With enough training they
# tend to carry the larger magnitudes; at toy scale the ordering is loose.

# %%
stats = latent_group_stats(model, val)
for g in stats["groups"]:
    print(
        f"group {g['group']} ({g['channels']:2d} ch): mean |y_hat| {g['mean_abs_y_hat']:.3f} "
        f"± {g['mean_abs_y_hat_se']:.3f}, mean |symbol| {g['mean_abs_symbol']:.3f}, lag-1 {g['lag1_autocorr']:.3f}"
    )

# %% [markdown]
# ## Sampling locations

# %%
record = visualize_offsets(model, val[0], (8, 8), json_path=work / "offsets.json", png_path=work / "offsets.png")
grid = kernel_grid(record["kernel_side"])
moves = [np.hypot(p["row"] - 8 - grid[p["point"]][0], p["col"] - 8 - grid[p["point"]][1]) for p in record["points"]]
print(f"mean displacement from the regular grid: {np.mean(moves):.3f} px (max {np.max(moves):.3f})")
print("written:", work / "offsets.png")
print("groups:", record["groups"], " points per group:", record["kernel_side"] ** 2)
