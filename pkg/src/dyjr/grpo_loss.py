"""Group-relative advantages and the clipped surrogate objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .policy import PolicyParams, Trajectory, accumulate_batch_grad, batch_logprobs, stack_trajectories
from .task_env import Query


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    sigma_floor: float = 1e-6

    def __post_init__(self) -> None:
        if not (self.eps_low > 0 and self.eps_high > 0):
            raise ConfigError(f"clip ratios must be positive, got ({self.eps_low}, {self.eps_high})")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive")


def group_advantages(rewards: Sequence[float] | np.ndarray, sigma_floor: float = 1e-6) -> np.ndarray:
    """``(r - mean) / std`` with the population std; all zeros for a flat group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError(f"a group needs at least 2 rewards, got {r.size}")
    sigma = r.std()
    if sigma < sigma_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def merged_advantage(rewards: Sequence[float] | np.ndarray, sigma_floor: float = 1e-6) -> float:
    """Advantage of one extra correct response merged into a group's rewards."""
    merged = np.append(np.asarray(rewards, dtype=np.float64), 1.0)
    return float(group_advantages(merged, sigma_floor)[-1])


@dataclass(eq=False)
class GroupRollout:
    query: Query
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray
    confidence: int

    @classmethod
    def from_trajectories(cls, query: Query, trajectories: list[Trajectory], sigma_floor: float = 1e-6):
        rewards = np.array([t.reward for t in trajectories], dtype=np.int64)
        adv = group_advantages(rewards, sigma_floor)
        return cls(query, list(trajectories), rewards, adv, int(rewards.sum()))

    @property
    def size(self) -> int:
        return len(self.trajectories)


def surrogate_loss_and_grad(
    params: PolicyParams,
    trajectories: Sequence[Trajectory],
    advantages: np.ndarray,
    clip: ClipConfig,
    grad_out: np.ndarray | None,
    temperature: float = 1.0,
) -> float:
    """Token-mean clipped surrogate over a flat list of trajectories.

    ``advantages`` has one entry per trajectory and is broadcast over its
    tokens. Gradient flows only through tokens whose unclipped term attains
    the minimum.
    """
    if not trajectories:
        return 0.0
    cols = stack_trajectories(params.spec, trajectories)
    return surrogate_from_arrays(
        params, cols["contexts"], cols["tokens"], cols["logprobs_old"], advantages, clip, grad_out, temperature
    )


def surrogate_from_arrays(
    params: PolicyParams,
    contexts: np.ndarray,
    tokens: np.ndarray,
    logprobs_old: np.ndarray,
    advantages: np.ndarray,
    clip: ClipConfig,
    grad_out: np.ndarray | None,
    temperature: float = 1.0,
) -> float:
    total = tokens.size
    logp = batch_logprobs(params, contexts, tokens, temperature)
    with np.errstate(over="ignore", invalid="ignore"):
        rho = np.exp(logp - logprobs_old)
    if not np.isfinite(rho).all():
        raise NumericError("non-finite importance ratio (corrupt stored log-probabilities?)")
    adv = np.broadcast_to(np.asarray(advantages, dtype=np.float64)[:, None], rho.shape)
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - clip.eps_low, 1.0 + clip.eps_high) * adv
    loss = -float(np.minimum(unclipped, clipped).sum()) / total
    if grad_out is not None:
        active = unclipped <= clipped
        weights = np.where(active, -unclipped / total, 0.0)
        accumulate_batch_grad(params, contexts, tokens, weights, grad_out, temperature)
    return loss


def grpo_loss_and_grad(
    params: PolicyParams,
    groups: GroupRollout | Sequence[GroupRollout],
    clip: ClipConfig,
    grad_out: np.ndarray | None,
    temperature: float = 1.0,
) -> float:
    """On-policy GRPO loss; the token mean runs over every token of every group."""
    if isinstance(groups, GroupRollout):
        groups = [groups]
    trajectories = [t for g in groups for t in g.trajectories]
    advantages = np.concatenate([g.advantages for g in groups]) if groups else np.zeros(0)
    return surrogate_loss_and_grad(params, trajectories, advantages, clip, grad_out, temperature)
