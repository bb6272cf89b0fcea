"""Training loop for GRPO, DyJR and the RLEP-style replay baselines.

One macro-step is: snapshot the policy and roll out ``G`` responses for each
of ``prompt_batch`` queries, maintain the replay store, take the configured
number of gradient steps on the on-policy loss plus the replay term, and
append a :class:`StepRecord` to the metrics log.

Every source of randomness is a named substream of the root seed, so turning
a feature on or off never shifts the random numbers seen by another one.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .config import TrainConfig
from .divergence import replay_loss_and_grad
from .errors import ConfigError, NumericError, StorageError
from .grpo_loss import GroupRollout, grpo_loss_and_grad, surrogate_loss_and_grad
from .metrics import pass_at_k, token_rank_stats
from .policy import PolicyParams, Trajectory, sample_batch, sorted_logprobs
from .replay_buffer import ReplayBuffer, RLEPStore, attach_replay_advantages
from .task_env import Query, sample_query_arrays, verify_batch

log = logging.getLogger(__name__)

STREAMS = ("queries", "rollout", "admission", "replay", "eval_queries", "eval")


@dataclass
class StepRecord:
    step: int
    mean_reward: float
    loss_grpo: float
    loss_reg: float
    buffer_size: int
    admitted_count: int
    evicted_count: int
    approx_entropy_mean: float
    rank1_prob: float
    rank2_prob: float | None
    rank3_prob: float | None
    eval_pass1: float | None = None
    eval_pass16: float | None = None
    eval_mean_reward: float | None = None
    distinct_correct_mean: float | None = None
    clamp_hits: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


RECORD_FIELDS = [f.name for f in dataclasses.fields(StepRecord)]


def _stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS.index(name), *extra)))


def eval_query_set(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Held-out evaluation queries, drawn from their own substream."""
    return sample_query_arrays(cfg.task, cfg.eval_queries, _stream(cfg.seed, "eval_queries"))


def evaluate(
    params: PolicyParams,
    cfg: TrainConfig,
    queries: tuple[np.ndarray, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    n_samples: int | None = None,
) -> dict[str, float]:
    """Greedy pass@1 plus sampled pass@k, mean reward and distinct correct answers per query."""
    moduli, targets = queries if queries is not None else eval_query_set(cfg)
    rng = rng if rng is not None else _stream(cfg.seed, "eval", 0)
    n = n_samples or cfg.eval_samples
    greedy, _, _, _ = sample_batch(params, moduli, targets, cfg.temperature_eval, rng, greedy=True)
    pass1 = float(verify_batch(moduli, targets, greedy).mean())

    rep_m, rep_t = np.repeat(moduli, n), np.repeat(targets, n)
    tokens, _, _, _ = sample_batch(params, rep_m, rep_t, cfg.temperature_eval, rng)
    rewards = verify_batch(rep_m, rep_t, tokens).reshape(-1, n)
    tokens = tokens.reshape(len(moduli), n, -1)
    pass_k = [pass_at_k(n, int(c), n) for c in rewards.sum(axis=1)]
    distinct = [len({row.tobytes() for row in tokens[i][rewards[i] == 1]}) for i in range(len(moduli))]
    return {
        "eval_pass1": pass1,
        "eval_pass16": float(np.mean(pass_k)),
        "eval_mean_reward": float(rewards.mean()),
        "distinct_correct_mean": float(np.mean(distinct)),
    }


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.params = PolicyParams.zeros(cfg.task)
        self.step = 0
        self.rngs = {name: _stream(cfg.seed, name) for name in STREAMS if name not in ("eval", "eval_queries")}
        self.eval_queries = eval_query_set(cfg)
        if cfg.replay_mode in ("dyjr", "rlep_dynamic"):
            self.buffer: ReplayBuffer | RLEPStore | None = ReplayBuffer(
                cfg.buffer.max_age, cfg.rollouts_per_step, cfg.buffer.fill
            )
        elif cfg.replay_mode == "rlep":
            self.buffer = RLEPStore(per_query=2)
        else:
            self.buffer = None
        self.adam_m = self.adam_v = None
        if cfg.optimizer == "adam":
            self.adam_m = np.zeros_like(self.params.table)
            self.adam_v = np.zeros_like(self.params.table)
        self.n_updates = 0
        self.dump_dir: Path | None = None

    # -- rollout -----------------------------------------------------------

    def rollout(self) -> tuple[list[GroupRollout], np.ndarray]:
        cfg, spec, g = self.cfg, self.cfg.task, self.cfg.group_size
        moduli, targets = sample_query_arrays(spec, cfg.prompt_batch, self.rngs["queries"])
        rep_m, rep_t = np.repeat(moduli, g), np.repeat(targets, g)
        tokens, logprobs, contexts, dist = sample_batch(
            self.params, rep_m, rep_t, cfg.temperature_train, self.rngs["rollout"]
        )
        rewards = verify_batch(rep_m, rep_t, tokens)
        groups = []
        for i, (m, t) in enumerate(zip(moduli.tolist(), targets.tolist())):
            q = Query.make(spec, m, t)
            trajs = []
            for row in range(i * g, (i + 1) * g):
                traj = Trajectory(q, tokens[row], logprobs[row], int(rewards[row]), self.step)
                traj._contexts = contexts[row]
                trajs.append(traj)
            groups.append(GroupRollout.from_trajectories(q, trajs, cfg.clip.sigma_floor))
        return groups, dist

    # -- optimisation ------------------------------------------------------

    def _apply(self, grad: np.ndarray) -> None:
        cfg = self.cfg
        self.n_updates += 1
        if cfg.optimizer == "sgd":
            self.params.table -= cfg.learning_rate * grad
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            self.adam_m = b1 * self.adam_m + (1 - b1) * grad
            self.adam_v = b2 * self.adam_v + (1 - b2) * grad * grad
            m_hat = self.adam_m / (1 - b1**self.n_updates)
            v_hat = self.adam_v / (1 - b2**self.n_updates)
            self.params.table -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        self.params.check_finite()

    def _replay_term(self, grad: np.ndarray) -> tuple[float, int]:
        cfg = self.cfg
        if self.buffer is None:
            return 0.0, 0
        batch = self.buffer.sample(cfg.replay_batch, self.rngs["replay"])
        if cfg.replay_mode == "dyjr":
            res = replay_loss_and_grad(self.params, batch, cfg.regularizer, grad, cfg.temperature_train)
            return res.loss, res.clamp_hits
        adv = np.array([t.advantage for t in batch])
        return surrogate_loss_and_grad(self.params, batch, adv, cfg.clip, grad, cfg.temperature_train), 0

    def optimise(self, groups: list[GroupRollout]) -> tuple[float, float, int]:
        cfg = self.cfg
        per = cfg.prompts_per_update
        on_losses, reg_losses, clamp_hits = [], [], 0
        for _ in range(cfg.inner_updates):
            for start in range(0, len(groups), per):
                grad = np.zeros_like(self.params.table)
                on_losses.append(
                    grpo_loss_and_grad(self.params, groups[start : start + per], cfg.clip, grad, cfg.temperature_train)
                )
                reg, hits = self._replay_term(grad)
                reg_losses.append(reg)
                clamp_hits += hits
                self._apply(grad)
        return float(np.mean(on_losses)), float(np.mean(reg_losses)), clamp_hits

    # -- one macro-step ----------------------------------------------------

    def run_step(self) -> StepRecord:
        cfg = self.cfg
        self.step += 1
        groups, dist = self.rollout()

        admitted = evicted = 0
        if self.buffer is not None:
            if cfg.replay_mode != "dyjr":
                attach_replay_advantages(groups, cfg.clip.sigma_floor)
            admitted, evicted = self.buffer.maintain(groups, self.step, self.rngs["admission"])

        try:
            loss_on, loss_reg, clamp_hits = self.optimise(groups)
        except NumericError:
            self._dump_failure(groups)
            raise

        k = min(cfg.entropy_top_k, cfg.task.vocab_size)
        stats = token_rank_stats(sorted_logprobs(dist.reshape(-1, dist.shape[-1]), k))
        ranks = stats.rank_prob_mean
        record = StepRecord(
            step=self.step,
            mean_reward=float(np.mean([g.rewards.mean() for g in groups])),
            loss_grpo=loss_on,
            loss_reg=loss_reg,
            buffer_size=len(self.buffer) if self.buffer is not None else 0,
            admitted_count=admitted,
            evicted_count=evicted,
            approx_entropy_mean=stats.approx_entropy_mean,
            rank1_prob=float(ranks[0]),
            rank2_prob=float(ranks[1]) if k > 1 else None,
            rank3_prob=float(ranks[2]) if k > 2 else None,
            clamp_hits=clamp_hits,
        )
        if self.step % cfg.eval_every == 0 or self.step == cfg.total_steps:
            ev = evaluate(self.params, cfg, self.eval_queries, _stream(cfg.seed, "eval", self.step))
            for key, value in ev.items():
                setattr(record, key, value)
        return record

    def _dump_failure(self, groups: list[GroupRollout]) -> None:
        if self.dump_dir is None:
            return
        path = self.dump_dir / f"numeric_error_step{self.step}.json"
        payload = {
            "step": self.step,
            "groups": [
                {
                    "query": [g.query.modulus, g.query.target],
                    "tokens": [t.tokens.tolist() for t in g.trajectories],
                    "logprobs_old": [t.logprobs_old.tolist() for t in g.trajectories],
                    "advantages": g.advantages.tolist(),
                }
                for g in groups
            ],
        }
        path.write_text(json.dumps(payload))
        log.error("numeric error at step %d; batch dumped to %s", self.step, path)

    # -- checkpoints -------------------------------------------------------

    def state_dict(self) -> dict[str, Any]:
        state = {
            "step": self.step,
            "vocab_size": self.params.vocab_size,
            "n_contexts": self.params.n_contexts,
            "table": self.params.table.ravel().tolist(),
            "config_digest": self.cfg.digest(),
            "rng": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
            "buffer": self.buffer.to_json() if self.buffer is not None else None,
            "n_updates": self.n_updates,
        }
        if self.adam_m is not None:
            state["optimizer"] = {"m": self.adam_m.ravel().tolist(), "v": self.adam_v.ravel().tolist()}
        return state

    def save_checkpoint(self, path: str | Path) -> None:
        save_checkpoint(self, path)


def _read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        state = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StorageError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    required = ("step", "vocab_size", "n_contexts", "table", "config_digest")
    if not isinstance(state, dict) or any(key not in state for key in required):
        raise StorageError(f"checkpoint {path} lacks one of {required}")
    return state


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(trainer.state_dict()), encoding="utf-8")
    os.replace(tmp, path)


def load_params(path: str | Path, cfg: TrainConfig) -> tuple[PolicyParams, dict[str, Any]]:
    """Policy table from a checkpoint, after shape checks against ``cfg.task``."""
    state = _read_checkpoint(path)
    params = PolicyParams.zeros(cfg.task)
    if state["vocab_size"] != params.vocab_size or state["n_contexts"] != params.n_contexts:
        raise ConfigError(
            f"checkpoint shape ({state['n_contexts']}, {state['vocab_size']}) does not match "
            f"config ({params.n_contexts}, {params.vocab_size})"
        )
    table = np.asarray(state["table"], dtype=np.float64)
    if table.size != params.table.size:
        raise StorageError(f"checkpoint table has {table.size} entries, expected {params.table.size}")
    params.table = table.reshape(params.table.shape)
    params.check_finite()
    return params, state


def load_checkpoint(path: str | Path, cfg: TrainConfig) -> Trainer:
    """A trainer restored to the exact state of the checkpoint. Nothing is mutated on failure."""
    params, state = load_params(path, cfg)
    if state["config_digest"] != cfg.digest():
        raise ConfigError("checkpoint was written under a different config (digest mismatch)")
    trainer = Trainer(cfg)
    trainer.params = params
    trainer.step = int(state["step"])
    trainer.n_updates = int(state.get("n_updates", 0))
    try:
        for name, rng_state in state["rng"].items():
            trainer.rngs[name].bit_generator.state = rng_state
        if trainer.buffer is not None:
            trainer.buffer.load_json(state["buffer"])
        if cfg.optimizer == "adam":
            shape = params.table.shape
            trainer.adam_m = np.asarray(state["optimizer"]["m"], dtype=np.float64).reshape(shape)
            trainer.adam_v = np.asarray(state["optimizer"]["v"], dtype=np.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise StorageError(f"checkpoint {path} is incomplete: {exc}") from exc
    return trainer


@dataclass
class TrainResult:
    trainer: Trainer
    records: list[StepRecord]

    @property
    def params(self) -> PolicyParams:
        return self.trainer.params


def iter_steps(trainer: Trainer) -> Iterator[StepRecord]:
    while trainer.step < trainer.cfg.total_steps:
        yield trainer.run_step()


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or resume) training; with ``out_dir`` writes ``metrics.jsonl`` and checkpoints.

    ``stop_after`` halts once that step is reached, as if interrupted.
    """
    trainer = load_checkpoint(resume, cfg) if resume is not None else Trainer(cfg)
    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainer.dump_dir = out
        log_path = out / "metrics.jsonl"
        kept = []
        if resume is not None and log_path.exists():
            kept = [line for line in log_path.read_text().splitlines() if json.loads(line)["step"] <= trainer.step]
        log_file = log_path.open("w", encoding="utf-8")
        log_file.writelines(line + "\n" for line in kept)
    records = []
    try:
        for record in iter_steps(trainer):
            records.append(record)
            if log_file is not None:
                log_file.write(record.to_json() + "\n")
                log_file.flush()
                if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                    save_checkpoint(trainer, out / f"checkpoint_step{trainer.step:06d}.json")
            if stop_after is not None and trainer.step >= stop_after:
                break
        if out_dir is not None:
            save_checkpoint(trainer, out / "checkpoint.json")
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(trainer, records)


def report(log_path: str | Path, out_path: str | Path | None = None) -> str:
    """Convert a JSONL metrics log into CSV (one row per step, StepRecord column order)."""
    try:
        lines = Path(log_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read log {log_path}: {exc}") from exc
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if not isinstance(row, dict) or set(row) != set(RECORD_FIELDS):
                raise ValueError("fields do not match StepRecord")
        except ValueError as exc:
            raise StorageError(f"{log_path}:{lineno}: malformed metrics line ({exc})") from exc
        writer.writerow(["" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]
                         for k in RECORD_FIELDS])
    text = buf.getvalue()
    if out_path is not None:
        try:
            Path(out_path).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {out_path}: {exc}") from exc
    return text
