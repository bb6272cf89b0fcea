"""Replay stores for perfect (reward 1) trajectories.

:class:`ReplayBuffer` is the dynamic buffer: FIFO with a max-age rule,
confidence-stratified admission up to a per-step quota that is elevated
during warm-up, and a hard capacity of the last ``max_age`` quotas.
:class:`RLEPStore` is the comparison store that keeps the first two correct
trajectories of every query forever.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, StorageError
from .grpo_loss import GroupRollout, merged_advantage
from .policy import Trajectory
from .task_env import Query


@dataclass(frozen=True)
class FillSchedule:
    warmup_steps: int = 20
    eta_warmup: float = 0.20
    eta_steady: float = 0.05

    def __post_init__(self) -> None:
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not 0 < self.eta_steady <= self.eta_warmup <= 1:
            raise ConfigError(
                f"need 0 < eta_steady <= eta_warmup <= 1, got {self.eta_steady}, {self.eta_warmup}"
            )

    def eta(self, step: int) -> float:
        return self.eta_warmup if step <= self.warmup_steps else self.eta_steady


def target_fill_count(sched: FillSchedule, step: int, rollouts_per_step: int) -> int:
    """Per-step admission quota: ``ceil(eta(step) * N)``."""
    if rollouts_per_step < 1:
        raise ConfigError("rollouts_per_step must be >= 1")
    # strip float noise so an exact product such as 0.05 * 20 does not ceil to 2
    return math.ceil(round(sched.eta(step) * rollouts_per_step, 9))


def _perfect(rollouts: Sequence[GroupRollout], confidence: int) -> list[Trajectory]:
    return [t for g in rollouts if g.confidence == confidence for t in g.trajectories if t.reward == 1]


def trajectory_to_json(t: Trajectory) -> dict[str, Any]:
    q = t.query
    return {
        "query": [q.query_id, q.target, q.modulus, q.seq_len, q.vocab_size],
        "tokens": t.tokens.tolist(),
        "logprobs_old": t.logprobs_old.tolist(),
        "reward": t.reward,
        "birth_step": t.birth_step,
        "advantage": t.advantage,
    }


def trajectory_from_json(obj: dict[str, Any]) -> Trajectory:
    try:
        q = Query(*obj["query"])
        return Trajectory(
            q, obj["tokens"], obj["logprobs_old"], int(obj["reward"]), int(obj["birth_step"]), float(obj["advantage"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StorageError(f"malformed buffer entry: {exc}") from exc


class ReplayBuffer:
    def __init__(self, max_age: int = 8, rollouts_per_step: int = 512, schedule: FillSchedule | None = None):
        if max_age < 0:
            raise ConfigError("max_age must be >= 0")
        if rollouts_per_step < 1:
            raise ConfigError("rollouts_per_step must be >= 1")
        self.max_age = max_age
        self.rollouts_per_step = rollouts_per_step
        self.schedule = schedule or FillSchedule()
        self.entries: list[Trajectory] = []

    def __len__(self) -> int:
        return len(self.entries)

    def evict_stale(self, step: int) -> int:
        """Drop every entry older than ``max_age`` steps; survivors keep their order."""
        keep = [e for e in self.entries if step - e.birth_step <= self.max_age]
        evicted = len(self.entries) - len(keep)
        self.entries = keep
        return evicted

    def capacity(self, step: int) -> int:
        """Sum of the quotas of the last ``max_age`` steps (``max_age * quota`` in steady state)."""
        first = max(1, step - self.max_age + 1)
        return sum(target_fill_count(self.schedule, s, self.rollouts_per_step) for s in range(first, step + 1))

    def admit(self, rollouts: Sequence[GroupRollout], step: int, rng: np.random.Generator) -> list[Trajectory]:
        """Admit perfect trajectories from high-confidence groups down to low, up to this step's quota.

        A stratum (all correct trajectories from groups with the same number
        of correct answers) is admitted whole while it fits; the first one that
        does not fit contributes a uniformly random subset that fills the quota
        exactly, and the sweep stops there.
        """
        remaining = target_fill_count(self.schedule, step, self.rollouts_per_step)
        group_size = max((g.size for g in rollouts), default=0)
        admitted: list[Trajectory] = []
        for k in range(group_size, 0, -1):
            if remaining == 0:
                break
            stratum = _perfect(rollouts, k)
            if not stratum:
                continue
            order = rng.permutation(len(stratum))[:remaining]
            admitted.extend(stratum[i] for i in order)
            remaining -= len(order)
        self.entries.extend(admitted)
        return admitted

    def enforce_capacity(self, step: int) -> int:
        overflow = len(self.entries) - self.capacity(step)
        if overflow <= 0:
            return 0
        del self.entries[:overflow]
        return overflow

    def maintain(self, rollouts: Sequence[GroupRollout], step: int, rng: np.random.Generator) -> tuple[int, int]:
        """Evict, admit, trim. Returns ``(admitted, evicted)`` counts."""
        evicted = self.evict_stale(step)
        admitted = self.admit(rollouts, step, rng)
        evicted += self.enforce_capacity(step)
        return len(admitted), evicted

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Trajectory]:
        """Uniform sample without replacement; the whole buffer if it is smaller than the batch."""
        return sample_without_replacement(self.entries, batch_size, rng)

    def to_json(self) -> dict[str, Any]:
        return {"kind": "dynamic", "entries": [trajectory_to_json(e) for e in self.entries]}

    def load_json(self, obj: dict[str, Any]) -> None:
        self.entries = [trajectory_from_json(e) for e in obj["entries"]]


class RLEPStore:
    """Keeps the first ``per_query`` correct trajectories of each query; never evicts."""

    def __init__(self, per_query: int = 2):
        self.per_query = per_query
        self.entries: list[Trajectory] = []
        self._count: dict[int, int] = defaultdict(int)

    def __len__(self) -> int:
        return len(self.entries)

    def maintain(self, rollouts: Sequence[GroupRollout], step: int, rng: np.random.Generator) -> tuple[int, int]:
        admitted = 0
        for g in rollouts:
            for t in g.trajectories:
                qid = t.query.query_id
                if t.reward == 1 and self._count[qid] < self.per_query:
                    self._count[qid] += 1
                    self.entries.append(t)
                    admitted += 1
        return admitted, 0

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Trajectory]:
        return sample_without_replacement(self.entries, batch_size, rng)

    def to_json(self) -> dict[str, Any]:
        return {"kind": "rlep", "entries": [trajectory_to_json(e) for e in self.entries]}

    def load_json(self, obj: dict[str, Any]) -> None:
        self.entries = [trajectory_from_json(e) for e in obj["entries"]]
        self._count = defaultdict(int)
        for e in self.entries:
            self._count[e.query.query_id] += 1


def sample_without_replacement(entries: Sequence[Trajectory], batch_size: int, rng: np.random.Generator):
    if batch_size <= 0 or not entries:
        return []
    if len(entries) <= batch_size:
        return list(entries)
    idx = rng.choice(len(entries), size=batch_size, replace=False)
    return [entries[i] for i in idx]


def attach_replay_advantages(rollouts: Sequence[GroupRollout], sigma_floor: float = 1e-6) -> None:
    """Freeze, on every correct trajectory, the advantage it would get if merged into its own group."""
    for g in rollouts:
        if g.confidence == 0:
            continue
        adv = merged_advantage(g.rewards, sigma_floor)
        for t in g.trajectories:
            if t.reward == 1:
                t.advantage = adv
