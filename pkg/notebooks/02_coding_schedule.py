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
# # The asymmetric coding schedule
#
# The latent is split into five channel groups of growing size. Small
# early groups are coded in four spatial stages (a 2x2 phase pattern), the
# larger later groups in two (a checkerboard). That gives 4+4+2+2+2 = 14
# autoregressive steps instead of the 320 a fully serial model would need.
#
# Below we print the step list, draw which positions each stage of a group
# covers, and count how much of the latent is readable when each step runs.

# %%
from dkic.entropy_model import ASYMMETRIC_SCHEDULE, build_schedule, readable_elements, stage_mask

sched = ASYMMETRIC_SCHEDULE
print("group sizes :", sched.group_sizes)
print("stage counts:", sched.stage_counts)
print("AR steps    :", sched.num_steps)
print("steps (group, stage):", sched.steps)

# %% [markdown]
# ## Stage masks on a 4x4 grid
#
# Four stages visit the diagonal phases first, then the off-diagonal ones.

# %%
for count in (4, 2):
    print(f"{count} stages")
    grid = [["." for _ in range(4)] for _ in range(4)]
    for j in range(1, count + 1):
        for r, c in stage_mask(j, count, 4, 4).nonzero().tolist():
            grid[r][c] = str(j)
    print("\n".join(" ".join(row) for row in grid), end="\n\n")

# %% [markdown]
# ## Context available per step
#
# The share of the latent already decoded when each step starts. A smaller
# toy schedule keeps the enumeration quick; the structure is the same.

# %%
toy = build_schedule([2, 2, 4, 8, 24], [4, 4, 2, 2, 2])
total = toy.latent_channels * 4 * 4
for step, (i, j) in enumerate(toy.steps):
    share = len(readable_elements(toy, step, 4, 4)) / total
    print(f"step {step:2d}  group {i + 1} stage {j + 1}: {100 * share:5.1f}% readable")
