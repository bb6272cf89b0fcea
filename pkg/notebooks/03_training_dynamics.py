# %% [markdown]
# # Training dynamics across replay modes
#
# Runs the four replay modes at the default configuration and compares terminal
# concentration (rank-1 probability, approximate entropy) and held-out performance.
# `SEEDS` trades runtime for stability; each run takes a few seconds on one CPU.

# %%
import numpy as np

from dyjr.config import TrainConfig
from dyjr.trainer import train

SEEDS = range(3)
MODES = ("grpo", "dyjr", "rlep", "rlep_dynamic")
FIELDS = ("rank1_prob", "approx_entropy_mean", "distinct_correct_mean", "eval_pass16")

# %%
terminal = {}
curves = {}
for mode in MODES:
    rows = []
    for seed in SEEDS:
        records = train(TrainConfig().with_overrides({"replay_mode": mode, "seed": seed})).records
        rows.append([getattr(records[-1], f) for f in FIELDS])
        curves.setdefault(mode, []).append([r.rank1_prob for r in records])
    terminal[mode] = np.median(np.array(rows), axis=0)

# %% [markdown]
# ## Terminal medians

# %%
print(f"{'mode':14s}" + "".join(f"{f:>24s}" for f in FIELDS))
for mode in MODES:
    print(f"{mode:14s}" + "".join(f"{v:24.4f}" for v in terminal[mode]))

# %% [markdown]
# ## Rank-1 probability over time (median across seeds)

# %%
for step in (1, 10, 25, 50, 100, 200, 300):
    print(f"step {step:3d}: " + "  ".join(f"{m} {np.median([c[step - 1] for c in curves[m]]):.3f}" for m in MODES))
