# %% [markdown]
# # Replay buffer behaviour during training
#
# The buffer keeps only correct trajectories, admits the most confident groups first up to
# a per-step quota, and evicts anything older than `max_age` steps. The quota is 20% of the
# step's rollouts for the first 20 steps and 5% afterwards, so the buffer fills quickly and
# then shrinks to a smaller steady state.

# %%
from dyjr.config import TrainConfig
from dyjr.replay_buffer import ReplayBuffer, target_fill_count
from dyjr.trainer import Trainer, iter_steps

cfg = TrainConfig().with_overrides({"total_steps": 60, "eval_every": 60})
trainer = Trainer(cfg)
print("rollouts per step:", cfg.rollouts_per_step)

# %%
print(" step  quota  admitted  evicted  size  capacity  mean_reward")
for rec in iter_steps(trainer):
    if rec.step <= 3 or rec.step % 5 == 0 or rec.step in (20, 21, 29):
        quota = target_fill_count(cfg.buffer.fill, rec.step, cfg.rollouts_per_step)
        print(f"{rec.step:5d} {quota:6d} {rec.admitted_count:9d} {rec.evicted_count:8d} "
              f"{rec.buffer_size:5d} {trainer.buffer.capacity(rec.step):9d} {rec.mean_reward:12.3f}")

# %% [markdown]
# ## Steady-state ceiling at scale
#
# With 4096 rollouts per step, a 5% quota and `max_age = 8`, the ceiling is eight quotas of 205.

# %%
big = ReplayBuffer(max_age=8, rollouts_per_step=4096)
print("warm-up capacity:", big.capacity(8), " steady-state capacity:", big.capacity(100))
