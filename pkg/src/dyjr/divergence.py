"""f-divergence regularizers computed from stored log-probabilities.

For a replayed token with ratio ``u = pi_theta / pi_old`` the per-token
penalty is ``f(u)``; averaging ``f(u)`` under ``pi_old`` estimates a
divergence between the stored and current policies without ever forming the
mixture distribution. Two choices of ``f``:

* ``js``:          ``u ln u - (u + 1) ln((u + 1) / 2)``, whose expectation is
                   twice the Jensen-Shannon divergence;
* ``forward_kl``:  ``(u - 1) - ln u``, whose expectation is ``KL(pi_old || pi_theta)``.

The closed-form divergences at the bottom are exact test oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .policy import PolicyParams, Trajectory, accumulate_batch_grad, batch_logprobs, stack_trajectories

log = logging.getLogger(__name__)

REGULARIZER_KINDS = ("js", "forward_kl", "none")


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "js"
    alpha: float = 0.05
    ratio_clamp: float = 1e4

    def __post_init__(self) -> None:
        if self.kind not in REGULARIZER_KINDS:
            raise ConfigError(f"unknown regularizer kind {self.kind!r}; expected one of {REGULARIZER_KINDS}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.ratio_clamp > 1:
            raise ConfigError(f"ratio_clamp must exceed 1, got {self.ratio_clamp}")


def ratio_u(logprob_current, logprob_old, clamp: float = 1e4):
    """``exp(logprob_current - logprob_old)`` clamped into ``[1/clamp, clamp]``."""
    cur = np.asarray(logprob_current, dtype=np.float64)
    old = np.asarray(logprob_old, dtype=np.float64)
    if not (np.isfinite(cur).all() and np.isfinite(old).all()):
        raise NumericError("non-finite log-probability in ratio")
    with np.errstate(over="ignore"):
        u = np.clip(np.exp(cur - old), 1.0 / clamp, clamp)
    return float(u) if u.ndim == 0 else u


def _positive(u) -> np.ndarray:
    arr = np.asarray(u, dtype=np.float64)
    if not (arr > 0).all():
        raise InputError("ratio u must be positive")
    return arr


def _scalar(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def f_js(u):
    u = _positive(u)
    d = u - 1.0
    # log1p keeps both terms accurate near u = 1, where they nearly cancel
    return _scalar(u * np.log1p(d) - (u + 1.0) * np.log1p(d / 2.0))


def f_js_grad_wrt_logprob(u):
    """``d f_js(u) / d log pi_theta = u * ln(2u / (u + 1))``."""
    u = _positive(u)
    return _scalar(u * np.log1p((u - 1.0) / (u + 1.0)))


def f_fkl(u):
    u = _positive(u)
    return _scalar((u - 1.0) - np.log(u))


def f_fkl_grad_wrt_logprob(u):
    u = _positive(u)
    return _scalar(u - 1.0)


_F = {
    "js": (f_js, f_js_grad_wrt_logprob),
    "forward_kl": (f_fkl, f_fkl_grad_wrt_logprob),
}


# lim_{u -> inf} f(u) / u
_SLOPE_AT_INFINITY = {"js": float(np.log(2.0)), "forward_kl": 1.0}


class RegularizerResult(NamedTuple):
    loss: float
    clamp_hits: int


def replay_loss_and_grad(
    params: PolicyParams,
    replay_batch: Sequence[Trajectory],
    cfg: RegularizerConfig,
    grad_out: np.ndarray | None,
    temperature: float = 1.0,
) -> RegularizerResult:
    """Length-mean then batch-mean of ``f(u)`` over a replay batch.

    The returned loss is unscaled; ``grad_out`` receives the gradient of
    ``cfg.alpha * loss``. Tokens whose ratio hit the clamp get no gradient
    (the clamped ratio is flat there).
    """
    if cfg.kind == "none" or not replay_batch:
        return RegularizerResult(0.0, 0)
    f, f_grad = _F[cfg.kind]
    cols = stack_trajectories(params.spec, replay_batch)
    logp = batch_logprobs(params, cols["contexts"], cols["tokens"], temperature)
    if not np.isfinite(logp).all() or not np.isfinite(cols["logprobs_old"]).all():
        raise NumericError("non-finite log-probability in replay batch")
    raw = logp - cols["logprobs_old"]
    bound = np.log(cfg.ratio_clamp)
    hit = np.abs(raw) > bound
    clamp_hits = int(hit.sum())
    if clamp_hits:
        log.info("ratio clamp hit on %d replay tokens", clamp_hits)
    u = ratio_u(logp, cols["logprobs_old"], cfg.ratio_clamp)
    per_token = f(u)
    n_batch = len(replay_batch)
    lengths = cols["lengths"][:, None]
    loss = float((per_token / lengths).sum(axis=1).mean()) if n_batch else 0.0
    if grad_out is not None and cfg.alpha != 0.0:
        weights = np.where(hit, 0.0, cfg.alpha * f_grad(u) / (lengths * n_batch))
        accumulate_batch_grad(params, cols["contexts"], cols["tokens"], weights, grad_out, temperature)
    return RegularizerResult(loss, clamp_hits)


def _simplex(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"{name} must be a non-empty vector")
    if (arr < 0).any() or abs(arr.sum() - 1.0) > 1e-9:
        raise InputError(f"{name} is not a probability vector")
    return arr


def closed_form_kl(p, q) -> float:
    """``KL(p || q)`` in nats with ``0 ln 0 = 0``; infinite if ``q`` misses support of ``p``."""
    p, q = _simplex(p, "p"), _simplex(q, "q")
    if p.shape != q.shape:
        raise InputError("p and q differ in length")
    mask = p > 0
    if (q[mask] == 0).any():
        return float("inf")
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def closed_form_js(p, q) -> float:
    """Jensen-Shannon divergence via the mixture ``m = (p + q) / 2``; lies in ``[0, ln 2]``."""
    p, q = _simplex(p, "p"), _simplex(q, "q")
    if p.shape != q.shape:
        raise InputError("p and q differ in length")
    m = 0.5 * (p + q)
    total = 0.0
    for a in (p, q):
        mask = a > 0
        total += 0.5 * float((a[mask] * np.log(a[mask] / m[mask])).sum())
    return total


def exact_estimator_sum(p, q, kind: str = "js") -> float:
    """``sum_x p(x) f(q(x) / p(x))``: the estimator's expectation under ``p``, no sampling.

    Outcomes with ``p(x) = 0 < q(x)`` contribute the limit ``q(x) * lim f(u) / u``,
    which is ``ln 2`` for ``js`` and ``1`` for ``forward_kl``.
    """
    p, q = _simplex(p, "p"), _simplex(q, "q")
    if p.shape != q.shape:
        raise InputError("p and q differ in length")
    f = _F[kind][0]
    mask = p > 0
    pm, qm = p[mask], q[mask]
    if kind == "forward_kl" and (qm == 0).any():
        return float("inf")
    # f_js(0) = ln 2 is finite; evaluate f only where q > 0
    vals = np.where(qm > 0, f(np.where(qm > 0, qm / pm, 1.0)), np.log(2.0))
    total = float((pm * vals).sum())
    return total + _SLOPE_AT_INFINITY[kind] * float(q[~mask].sum())
