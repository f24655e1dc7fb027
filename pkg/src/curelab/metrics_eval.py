"""Evaluation observables: avg@k, entropy-vs-temperature sweeps, entropy/reward scatter.

Training records log temperature-1 entropy. Everything here that says
``eval_entropy`` is measured on the temperature-adjusted distribution the
evaluator actually samples from.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import seeding
from .config import EvalConfig
from .env import DEFAULT_VOCAB, TaskInstance, Vocab, generate_task, verify
from .policy import PolicyParams, SamplerConfig, _entropy_rows, _log_softmax, forward, sample_batch, stack_contexts

log = logging.getLogger(__name__)

TASK_STREAM = 0
ROLLOUT_STREAM = 1


@dataclass
class TaskOutcome:
    task_seed: list[int]
    outcomes: list[int]

    @property
    def avg(self) -> float:
        return sum(self.outcomes) / len(self.outcomes)


@dataclass
class EvalResult:
    avg: float
    eval_entropy: float  # nats, temperature-adjusted, mean over all response tokens
    mean_resp_len: float
    temperature: float
    top_p: float
    k: int
    tasks: list[TaskOutcome]

    def records(self) -> list[dict]:
        return [
            {
                "task_seed": t.task_seed,
                "k": self.k,
                "temperature": self.temperature,
                "top_p": self.top_p,
                "outcomes": t.outcomes,
                "avg": t.avg,
            }
            for t in self.tasks
        ]


def eval_tasks(cfg: EvalConfig, vocab: Vocab = DEFAULT_VOCAB) -> list[TaskInstance]:
    return [generate_task((cfg.seed, seeding.EVAL, TASK_STREAM, i), cfg.difficulty, vocab) for i in range(cfg.task_count)]


def tempered_entropies(
    params: PolicyParams,
    items: Sequence[tuple[Sequence[int], Sequence[int]]],
    temperature: float,
    pad: int = 0,
) -> np.ndarray:
    """Per-position entropy of softmax(z / T) along teacher-forced responses, concatenated."""
    ctx, _ = stack_contexts(items, params.context, pad)
    Z = forward(params, ctx)[2]
    return _entropy_rows(_log_softmax(Z / temperature))


def evaluate(
    params: PolicyParams,
    cfg: EvalConfig,
    vocab: Vocab = DEFAULT_VOCAB,
    max_new_tokens: int = 32,
    tasks: Sequence[TaskInstance] | None = None,
) -> EvalResult:
    """Sample k rollouts per evaluation task and score them.

    Task i and its rollouts are addressed by (seed, EVAL, ...) coordinates
    that depend only on i, so evaluation order never changes a result.
    """
    tasks = list(tasks) if tasks is not None else eval_tasks(cfg, vocab)
    sampler = SamplerConfig(temperature=cfg.temperature, top_p=cfg.top_p, max_new_tokens=max_new_tokens)
    prompts, rows = [], []
    for i, task in enumerate(tasks):
        for j in range(cfg.k):
            prompts.append(task.prompt)
            rows.append((cfg.seed, seeding.EVAL, ROLLOUT_STREAM, i, j))
    trajs = sample_batch(params, prompts, rows, sampler, eos=vocab.eos, pad=vocab.pad)
    outcomes = []
    for i, task in enumerate(tasks):
        chunk = trajs[i * cfg.k : (i + 1) * cfg.k]
        outcomes.append(TaskOutcome(list(task.seed_path), [int(verify(task.answer, t.tokens, vocab)) for t in chunk]))
    H = tempered_entropies(params, [(t.prompt, t.tokens) for t in trajs], cfg.temperature, vocab.pad)
    avg = float(np.mean([o for t in outcomes for o in t.outcomes]))
    return EvalResult(
        avg=avg,
        eval_entropy=float(H.mean()),
        mean_resp_len=float(np.mean([len(t) for t in trajs])),
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        k=cfg.k,
        tasks=outcomes,
    )


def avg_at_k(params: PolicyParams, cfg: EvalConfig, vocab: Vocab = DEFAULT_VOCAB, max_new_tokens: int = 32) -> float:
    return evaluate(params, cfg, vocab, max_new_tokens).avg


def recount(records: Iterable[dict]) -> float:
    """avg@k recomputed from dumped per-task outcome records."""
    total = n = 0
    for rec in records:
        if "outcomes" in rec:
            total += sum(rec["outcomes"])
            n += len(rec["outcomes"])
    if n == 0:
        raise ValueError("no outcome records")
    return total / n


@dataclass
class SweepRow:
    temperature: float
    avg: float
    mean_entropy: float


def temperature_sweep(
    params: PolicyParams,
    temps: Sequence[float],
    cfg: EvalConfig,
    vocab: Vocab = DEFAULT_VOCAB,
    max_new_tokens: int = 32,
) -> list[SweepRow]:
    if any(not t > 0 for t in temps):
        raise ValueError(f"temperatures must be positive, got {list(temps)}")
    rows = []
    for T in temps:
        res = evaluate(params, replace(cfg, temperature=float(T)), vocab, max_new_tokens)
        rows.append(SweepRow(float(T), res.avg, res.eval_entropy))
    return rows


def entropy_reward_scatter(path: str | Path) -> tuple[list[tuple[float, float]], int]:
    """(mean_entropy, mean_reward) per step record, plus the number of malformed lines skipped.

    Header and summary records are not step records and are passed over silently.
    """
    points: list[tuple[float, float]] = []
    bad = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                bad += 1
                continue
            if not isinstance(rec, dict):
                bad += 1
                continue
            if rec.get("record") in ("header", "summary"):
                continue
            H, R = rec.get("mean_entropy"), rec.get("mean_reward")
            if not all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in (H, R)):
                bad += 1
                continue
            points.append((H, R))
    if bad:
        log.warning("%s: skipped %d malformed record(s)", path, bad)
    return points, bad
