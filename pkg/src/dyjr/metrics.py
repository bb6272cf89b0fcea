"""Diagnostics: top-k approximate entropy, rank-k probabilities, pass@k, mean@N, diversity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .task_env import Query, _check_tokens, verify

# exact big-integer pass@k below this n, log-space above
_EXACT_PASS_AT_K_MAX_N = 2048


@dataclass(frozen=True)
class TokenRankStats:
    approx_entropy_mean: float
    rank_prob_mean: np.ndarray
    token_count: int


def approx_entropy(topk_logprobs: Sequence[float] | np.ndarray) -> float:
    """Entropy of the top-k log-probabilities after renormalising them to sum to one."""
    lp = np.asarray(topk_logprobs, dtype=np.float64)
    if lp.ndim != 1 or lp.size < 1:
        raise InputError("need a non-empty vector of log-probabilities")
    return float(approx_entropy_rows(lp[None, :])[0])


def approx_entropy_rows(topk: np.ndarray) -> np.ndarray:
    z = topk - topk.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    h = -(np.exp(log_p) * log_p).sum(axis=-1)
    return np.maximum(h, 0.0)


def rank_k_avg_prob(per_token_topk: Sequence[Sequence[float]] | np.ndarray, rank: int) -> float:
    """Mean raw probability of the ``rank``-th most likely token (1-based)."""
    rows = [np.asarray(r, dtype=np.float64) for r in per_token_topk]
    if not rows:
        raise InputError("no tokens")
    if rank < 1 or any(rank > r.size for r in rows):
        raise InputError(f"rank {rank} out of range")
    return float(np.mean([math.exp(r[rank - 1]) for r in rows]))


def token_rank_stats(topk: np.ndarray) -> TokenRankStats:
    """Aggregate approximate entropy and rank-k means over rows of a sorted ``[N, k]`` matrix."""
    topk = np.asarray(topk, dtype=np.float64)
    return TokenRankStats(
        float(approx_entropy_rows(topk).mean()),
        np.exp(topk).mean(axis=0),
        int(topk.shape[0]),
    )


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: ``1 - C(n - c, k) / C(n, k)``."""
    if not (0 <= c <= n and 1 <= k <= n):
        raise InputError(f"need 0 <= c <= n and 1 <= k <= n, got n={n}, c={c}, k={k}")
    if n - c < k:
        return 1.0
    if c == 0:
        return 0.0
    if n <= _EXACT_PASS_AT_K_MAX_N:
        total = math.comb(n, k)
        return (total - math.comb(n - c, k)) / total
    # C(n-c, k) / C(n, k) = prod_{j=n-c+1}^{n} (1 - k / j), summed in log space
    log_fail = math.fsum(math.log1p(-k / j) for j in range(n - c + 1, n + 1))
    return -math.expm1(log_fail)


def pass_at_k_naive(rewards: Sequence[int] | np.ndarray, k: int) -> float:
    """Fraction of consecutive, disjoint k-blocks that contain a correct sample."""
    r = np.asarray(rewards)
    if not 1 <= k <= r.size:
        raise InputError(f"k={k} outside [1, {r.size}]")
    blocks = r[: (r.size // k) * k].reshape(-1, k)
    return float((blocks.max(axis=1) > 0).mean())


def mean_at_n(rewards: Sequence[int] | np.ndarray) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise InputError("mean@N of an empty sample")
    return float(r.mean())


def distinct_correct(q: Query, responses: Iterable[Sequence[int] | np.ndarray]) -> int:
    seen = set()
    for resp in responses:
        arr = _check_tokens(q, resp)
        if verify(q, arr):
            seen.add(arr.tobytes())
    return len(seen)
