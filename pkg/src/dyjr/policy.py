"""Tabular autoregressive softmax policy.

Logits live in a ``[n_contexts, vocab_size]`` table. A context is a perfect
(collision-free) flat index over the feature tuple

    (modulus, target, position, previous token or BOS, running sum mod m)

so ``log pi(y_j | x, y_<j)`` is a log-softmax of one table row and the
gradient of any weighted log-likelihood is available in closed form.
Everything below is vectorised over a batch of sequences; the single-query
functions are thin wrappers around the batched kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError
from .task_env import Query, TaskSpec, _check_tokens, verify

BOS = -1


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def n_contexts(spec: TaskSpec) -> int:
    lo, hi = spec.modulus_range
    return (hi - lo + 1) * hi * spec.seq_len * (spec.vocab_size + 1) * hi


def _flat_index(spec: TaskSpec, modulus, target, position, prev, running):
    lo, hi = spec.modulus_range
    idx = (modulus - lo) * hi + target
    idx = idx * spec.seq_len + position
    idx = idx * (spec.vocab_size + 1) + prev
    return idx * hi + running


def context_of(spec: TaskSpec, q: Query, position: int, prev_token: int, running_sum_mod: int) -> int:
    """Table row for one decoding state. ``prev_token=BOS`` at the first position."""
    lo, hi = spec.modulus_range
    if not lo <= q.modulus <= hi:
        raise InputError(f"modulus {q.modulus} outside {spec.modulus_range}")
    if not 0 <= position < spec.seq_len:
        raise InputError(f"position {position} outside [0, {spec.seq_len})")
    if prev_token == BOS:
        prev_token = spec.vocab_size
    elif not 0 <= prev_token < spec.vocab_size:
        raise InputError(f"prev_token {prev_token} is neither BOS nor in [0, {spec.vocab_size})")
    if not 0 <= running_sum_mod < q.modulus:
        raise InputError(f"running_sum_mod {running_sum_mod} outside [0, {q.modulus})")
    return int(_flat_index(spec, q.modulus, q.target, position, prev_token, running_sum_mod))


def sequence_contexts(spec: TaskSpec, moduli: np.ndarray, targets: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Context rows visited while emitting ``tokens`` (shape ``[B, L]``)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    batch, length = tokens.shape
    moduli = np.asarray(moduli, dtype=np.int64)[:, None]
    targets = np.asarray(targets, dtype=np.int64)[:, None]
    prev = np.empty_like(tokens)
    prev[:, 0] = spec.vocab_size
    prev[:, 1:] = tokens[:, :-1]
    csum = np.zeros_like(tokens)
    csum[:, 1:] = np.cumsum(tokens, axis=1)[:, :-1]
    position = np.broadcast_to(np.arange(length), (batch, length))
    return _flat_index(spec, moduli, targets, position, prev, csum % moduli)


@dataclass(eq=False)
class PolicyParams:
    spec: TaskSpec
    table: np.ndarray

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.float64)
        expected = (n_contexts(self.spec), self.spec.vocab_size)
        if self.table.shape != expected:
            raise InputError(f"table shape {self.table.shape} != {expected}")

    @classmethod
    def zeros(cls, spec: TaskSpec) -> "PolicyParams":
        return cls(spec, np.zeros((n_contexts(spec), spec.vocab_size)))

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    @property
    def n_contexts(self) -> int:
        return self.table.shape[0]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.spec, self.table.copy())

    def check_finite(self) -> None:
        if not np.isfinite(self.table).all():
            bad = np.argwhere(~np.isfinite(self.table))[:5].tolist()
            raise NumericError(f"non-finite policy logits at {bad}")


@dataclass(eq=False)
class Trajectory:
    """One sampled response with the log-probabilities recorded at generation time.

    ``advantage`` is only meaningful for replayed data in the RLEP-style
    objectives, where it is frozen when the trajectory enters the buffer.
    """

    query: Query
    tokens: np.ndarray
    logprobs_old: np.ndarray
    reward: int
    birth_step: int
    advantage: float = 0.0
    _contexts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.tokens = np.array(self.tokens, dtype=np.int64)
        self.logprobs_old = np.array(self.logprobs_old, dtype=np.float64)
        if self.tokens.shape != self.logprobs_old.shape or self.tokens.shape != (self.query.seq_len,):
            raise InputError("tokens and logprobs_old must both have length seq_len")
        if (self.logprobs_old > 0).any():
            raise InputError("stored log-probabilities must be <= 0")
        self.tokens.setflags(write=False)
        self.logprobs_old.setflags(write=False)

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[0])


def token_logprobs(params: PolicyParams, ctx: int, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    return log_softmax(params.table[ctx], temperature)


def top_k_logprobs(params: PolicyParams, ctx: int, k: int, temperature: float = 1.0) -> list[tuple[int, float]]:
    """The ``k`` most likely tokens, descending, ties broken toward smaller ids."""
    if not 1 <= k <= params.vocab_size:
        raise InputError(f"k={k} outside [1, {params.vocab_size}]")
    lp = token_logprobs(params, ctx, temperature)
    order = np.argsort(-lp, kind="stable")[:k]
    return [(int(tok), float(lp[tok])) for tok in order]


def sorted_logprobs(logprobs: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-``k`` of a ``[N, V]`` log-prob matrix, descending."""
    return -np.sort(-logprobs, axis=-1, kind="stable")[..., :k]


def sample_batch(
    params: PolicyParams,
    moduli: np.ndarray,
    targets: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
    greedy: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Decode one response per (modulus, target) row.

    Returns ``tokens [B, L]``, ``logprobs [B, L]`` of the chosen tokens,
    ``contexts [B, L]`` and the full per-position distributions
    ``dist [B, L, V]`` (log-probabilities at ``temperature``).
    """
    spec = params.spec
    moduli = np.asarray(moduli, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    batch, length, vocab = moduli.shape[0], spec.seq_len, spec.vocab_size
    tokens = np.zeros((batch, length), dtype=np.int64)
    contexts = np.zeros((batch, length), dtype=np.int64)
    dist = np.zeros((batch, length, vocab))
    prev = np.full(batch, vocab, dtype=np.int64)
    running = np.zeros(batch, dtype=np.int64)
    rows = np.arange(batch)
    for pos in range(length):
        ctx = _flat_index(spec, moduli, targets, pos, prev, running)
        lp = log_softmax(params.table[ctx], temperature)
        if greedy:
            tok = lp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(lp), axis=1)
            cdf[:, -1] = 1.0
            tok = (cdf <= rng.random(batch)[:, None]).sum(axis=1)
        contexts[:, pos] = ctx
        dist[:, pos] = lp
        tokens[:, pos] = tok
        prev = tok
        running = (running + tok) % moduli
    logprobs = dist[rows[:, None], np.arange(length)[None, :], tokens]
    return tokens, logprobs, contexts, dist


def sample_trajectory(
    params: PolicyParams, q: Query, temperature: float, step: int, rng: np.random.Generator
) -> Trajectory:
    if temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    tokens, logprobs, _, _ = sample_batch(params, np.array([q.modulus]), np.array([q.target]), temperature, rng)
    return Trajectory(q, tokens[0], logprobs[0], verify(q, tokens[0]), step)


def batch_logprobs(params: PolicyParams, contexts: np.ndarray, tokens: np.ndarray, temperature: float = 1.0):
    """Log-probabilities of ``tokens`` at ``contexts`` (any matching shapes)."""
    lp = log_softmax(params.table[contexts], temperature)
    return np.take_along_axis(lp, tokens[..., None], axis=-1)[..., 0]


def sequence_logprobs(
    params: PolicyParams, q: Query, tokens: Sequence[int] | np.ndarray, temperature: float = 1.0
) -> np.ndarray:
    arr = _check_tokens(q, tokens)
    ctx = sequence_contexts(params.spec, np.array([q.modulus]), np.array([q.target]), arr[None, :])[0]
    return batch_logprobs(params, ctx, arr, temperature)


def accumulate_batch_grad(
    params: PolicyParams,
    contexts: np.ndarray,
    tokens: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
    temperature: float = 1.0,
) -> None:
    """``grad_out += sum_n w_n * d/dtable log pi(tokens_n | contexts_n)``.

    The derivative of a log-softmax row is ``(onehot(y) - p) / T``.
    Contributions are scattered in flattened (row-major) order, so the result
    is bit-reproducible for a given batch layout.
    """
    contexts = np.asarray(contexts).reshape(-1)
    tokens = np.asarray(tokens).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not np.isfinite(weights).all():
        raise NumericError("non-finite gradient weights")
    if contexts.size == 0:
        return
    probs = np.exp(log_softmax(params.table[contexts], temperature))
    contrib = -probs * weights[:, None]
    contrib[np.arange(contexts.size), tokens] += weights
    contrib /= temperature
    np.add.at(grad_out, contexts, contrib)


def accumulate_weighted_grad(
    params: PolicyParams,
    q: Query,
    tokens: Sequence[int] | np.ndarray,
    weights: Sequence[float] | np.ndarray,
    grad_out: np.ndarray,
    temperature: float = 1.0,
) -> None:
    arr = _check_tokens(q, tokens)
    ctx = sequence_contexts(params.spec, np.array([q.modulus]), np.array([q.target]), arr[None, :])[0]
    accumulate_batch_grad(params, ctx, arr, np.asarray(weights, dtype=np.float64), grad_out, temperature)


def stack_trajectories(spec: TaskSpec, trajectories: Sequence[Trajectory]) -> dict[str, np.ndarray]:
    """Column arrays for a list of trajectories (contexts cached per trajectory)."""
    tokens = np.stack([t.tokens for t in trajectories])
    missing = [i for i, t in enumerate(trajectories) if t._contexts is None]
    if missing:
        sub = [trajectories[i] for i in missing]
        ctx = sequence_contexts(
            spec,
            np.array([t.query.modulus for t in sub]),
            np.array([t.query.target for t in sub]),
            tokens[missing],
        )
        for i, row in zip(missing, ctx):
            trajectories[i]._contexts = row
    return {
        "tokens": tokens,
        "contexts": np.stack([t._contexts for t in trajectories]),
        "logprobs_old": np.stack([t.logprobs_old for t in trajectories]),
        "advantage": np.array([t.advantage for t in trajectories], dtype=np.float64),
        "lengths": np.array([t.seq_len for t in trajectories], dtype=np.float64),
    }
