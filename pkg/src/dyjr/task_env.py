"""Synthetic verifiable-reward tasks.

The only task kind is ``modsum``: a query fixes a modulus ``m`` and a target
residue ``t``; a response is a sequence of ``seq_len`` tokens drawn from
``0..vocab_size-1`` and earns reward 1 iff its sum is congruent to ``t`` mod
``m``. Every residue is reachable, many distinct responses are correct, and
the correct set can be counted exactly, which makes collapse onto a single
solution path directly observable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, InputError

TASK_KINDS = ("modsum",)

# count_solutions refuses instances whose response space exceeds this.
MAX_RESPONSE_SPACE = 10**8


@dataclass(frozen=True)
class TaskSpec:
    task_kind: str = "modsum"
    vocab_size: int = 10
    seq_len: int = 6
    modulus_range: tuple[int, int] = (3, 9)

    def __post_init__(self) -> None:
        object.__setattr__(self, "modulus_range", tuple(int(v) for v in self.modulus_range))
        self.validate()

    def validate(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task_kind {self.task_kind!r}; expected one of {TASK_KINDS}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if len(self.modulus_range) != 2:
            raise ConfigError("modulus_range must be a [lo, hi] pair")
        lo, hi = self.modulus_range
        if not 2 <= lo <= hi:
            raise ConfigError(f"modulus_range must satisfy 2 <= lo <= hi, got {self.modulus_range}")

    @property
    def modulus_lo(self) -> int:
        return self.modulus_range[0]

    @property
    def modulus_hi(self) -> int:
        return self.modulus_range[1]


def query_key(modulus: int, target: int) -> int:
    """Stable id of the (modulus, target) pair: ids are contiguous over m = 2, 3, ..."""
    return modulus * (modulus - 1) // 2 - 1 + target


@dataclass(frozen=True)
class Query:
    query_id: int
    target: int
    modulus: int
    seq_len: int
    vocab_size: int = 10

    def __post_init__(self) -> None:
        if self.modulus < 2:
            raise InputError(f"modulus must be >= 2, got {self.modulus}")
        if not 0 <= self.target < self.modulus:
            raise InputError(f"target {self.target} outside [0, {self.modulus})")

    @classmethod
    def make(cls, spec: TaskSpec, modulus: int, target: int) -> "Query":
        return cls(query_key(modulus, target), int(target), int(modulus), spec.seq_len, spec.vocab_size)


def sample_queries(spec: TaskSpec, n: int, rng: np.random.Generator) -> list[Query]:
    """Draw ``n`` queries: modulus uniform over the spec range, target uniform in ``[0, m)``."""
    if n < 1:
        raise ConfigError(f"need at least one query, got n={n}")
    spec.validate()
    moduli, targets = sample_query_arrays(spec, n, rng)
    return [Query.make(spec, m, t) for m, t in zip(moduli.tolist(), targets.tolist())]


def sample_query_arrays(spec: TaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = spec.modulus_range
    moduli = rng.integers(lo, hi + 1, size=n)
    targets = rng.integers(0, moduli)
    return moduli.astype(np.int64), targets.astype(np.int64)


def _check_tokens(q: Query, tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim != 1 or arr.shape[0] != q.seq_len:
        raise InputError(f"expected {q.seq_len} tokens, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"tokens must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= q.vocab_size):
        raise InputError(f"token outside [0, {q.vocab_size}): {arr.tolist()}")
    return arr.astype(np.int64)


def verify(q: Query, tokens: Sequence[int] | np.ndarray) -> int:
    """Binary reward: 1 iff ``sum(tokens) % q.modulus == q.target``."""
    arr = _check_tokens(q, tokens)
    return int(int(arr.sum()) % q.modulus == q.target)


def verify_batch(moduli: np.ndarray, targets: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Vectorised :func:`verify` over rows of ``tokens`` (no range checks)."""
    return (tokens.sum(axis=1) % moduli == targets).astype(np.int64)


def count_solutions(q: Query, spec: TaskSpec) -> int:
    """Exact number of correct responses, by dynamic programming over residues."""
    v, length = spec.vocab_size, q.seq_len
    if v**length > MAX_RESPONSE_SPACE:
        raise CapacityError(f"vocab_size**seq_len = {v}**{length} exceeds {MAX_RESPONSE_SPACE}")
    m = q.modulus
    per_token = [0] * m
    for tok in range(v):
        per_token[tok % m] += 1
    ways = [1] + [0] * (m - 1)
    for _ in range(length):
        nxt = [0] * m
        for r, w in enumerate(ways):
            if w:
                for d, c in enumerate(per_token):
                    nxt[(r + d) % m] += w * c
        ways = nxt
    return ways[q.target]
