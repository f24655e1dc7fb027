"""Critical-token branching and group assembly.

For each query, N1 rollouts are drawn from the old policy. In each one a fork
position is drawn uniformly from the K highest-entropy positions, the tokens
before it are appended to the query, and N2 more rollouts are sampled from that
refined prompt. The group is the N1 + N1*N2 trajectories together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import seeding
from .env import DEFAULT_VOCAB, RewardConfig, TaskInstance, Vocab, reward, verify
from .policy import Origin, PolicyParams, SamplerConfig, Trajectory, sample_batch


@dataclass(frozen=True)
class BranchConfig:
    n1: int = 4
    n2: int = 3
    top_k: int = 20

    def __post_init__(self) -> None:
        if self.n1 < 1:
            raise ValueError("n1 must be >= 1")
        if self.n2 < 0:
            raise ValueError("n2 must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    @property
    def group_size(self) -> int:
        return self.n1 * (1 + self.n2)


@dataclass(frozen=True)
class BranchRecord:
    parent_index: int
    t_star: int  # 1-based
    candidate_set: tuple[int, ...]  # 1-based, ascending
    prefix: tuple[int, ...]
    refined_prompt: tuple[int, ...]


@dataclass
class Group:
    query: TaskInstance
    initial: list[Trajectory]
    branches: list[tuple[BranchRecord, list[Trajectory]]] = field(default_factory=list)

    @property
    def all_trajectories(self) -> list[Trajectory]:
        out = list(self.initial)
        for _, trajs in self.branches:
            out.extend(trajs)
        return out

    def __len__(self) -> int:
        return len(self.initial) + sum(len(t) for _, t in self.branches)

    @property
    def num_verified(self) -> int:
        return sum(t.verified for t in self.all_trajectories)


def candidate_positions(entropies: Sequence[float], top_k: int) -> tuple[int, ...]:
    """1-based indices of the min(top_k, T) largest entropies; ties go to earlier positions."""
    H = np.asarray(entropies, dtype=float)
    if H.size == 0:
        raise ValueError("empty trajectory has no positions to fork at")
    order = np.lexsort((np.arange(H.size), -H))
    chosen = order[: min(top_k, H.size)]
    return tuple(int(i) + 1 for i in np.sort(chosen))


def select_critical(traj: Trajectory, top_k: int, rng: np.random.Generator) -> tuple[int, tuple[int, ...]]:
    cands = candidate_positions(traj.entropies, top_k)
    t_star = cands[int(rng.integers(len(cands)))]
    return t_star, cands


def refined_prompt(q: Sequence[int], traj: Trajectory, t_star: int) -> tuple[int, ...]:
    if not 1 <= t_star <= len(traj.tokens):
        raise ValueError(f"t_star={t_star} outside 1..{len(traj.tokens)}")
    return tuple(int(x) for x in q) + tuple(int(x) for x in traj.tokens[: t_star - 1])


def score(traj: Trajectory, task: TaskInstance, reward_cfg: RewardConfig, vocab: Vocab = DEFAULT_VOCAB) -> None:
    """Fill verified/reward in place. Branches are judged on prefix || continuation."""
    prefix = traj.prompt[len(task.prompt):]
    traj.answer_tokens = np.concatenate([np.asarray(prefix, dtype=np.int64), traj.tokens])
    traj.verified = verify(task.answer, traj.answer_tokens, vocab)
    traj.reward = reward(traj, reward_cfg)


def build_groups(
    params_old: PolicyParams,
    tasks: Sequence[TaskInstance],
    coords: Sequence[Sequence[int]],
    cfg: BranchConfig,
    sampler: SamplerConfig,
    reward_cfg: RewardConfig,
    vocab: Vocab = DEFAULT_VOCAB,
) -> list[Group]:
    """Build one group per task; rows from all tasks share a sampling batch.

    Group k depends only on (params_old, tasks[k], coords[k], configs).
    """
    eos, pad = vocab.eos, vocab.pad
    prompts, rows = [], []
    for task, c in zip(tasks, coords):
        for j in range(cfg.n1):
            prompts.append(task.prompt)
            rows.append(seeding.extend(c, seeding.INITIAL_ROLLOUT, j))
    flat = sample_batch(params_old, prompts, rows, sampler, eos=eos, pad=pad)
    groups = []
    for k, task in enumerate(tasks):
        initial = flat[k * cfg.n1 : (k + 1) * cfg.n1]
        for tr in initial:
            score(tr, task, reward_cfg, vocab)
        groups.append(Group(query=task, initial=initial))
    if cfg.n2 == 0:
        return groups

    records, prompts, rows, origins = [], [], [], []
    for k, (task, g) in enumerate(zip(tasks, groups)):
        for i, parent in enumerate(g.initial):
            t_star, cands = select_critical(parent, cfg.top_k, seeding.rng_for(seeding.extend(coords[k], seeding.FORK, i)))
            q2 = refined_prompt(task.prompt, parent, t_star)
            rec = BranchRecord(
                parent_index=i,
                t_star=t_star,
                candidate_set=cands,
                prefix=q2[len(task.prompt):],
                refined_prompt=q2,
            )
            records.append((k, rec))
            origin = Origin("branch", parent_index=i, t_star=t_star, prefix_len=t_star - 1)
            for j in range(cfg.n2):
                prompts.append(q2)
                rows.append(seeding.extend(coords[k], seeding.BRANCH_ROLLOUT, i, j))
                origins.append(origin)
    flat = sample_batch(params_old, prompts, rows, sampler, eos=eos, pad=pad, origins=origins)
    for r, (k, rec) in enumerate(records):
        trajs = flat[r * cfg.n2 : (r + 1) * cfg.n2]
        for tr in trajs:
            score(tr, tasks[k], reward_cfg, vocab)
        groups[k].branches.append((rec, trajs))
    return groups


def build_group(
    params_old: PolicyParams,
    task: TaskInstance,
    cfg: BranchConfig,
    sampler: SamplerConfig,
    reward_cfg: RewardConfig,
    coords: Sequence[int],
    vocab: Vocab = DEFAULT_VOCAB,
) -> Group:
    return build_groups(params_old, [task], [coords], cfg, sampler, reward_cfg, vocab)[0]


def inspect_branch(group: Group, vocab: Vocab = DEFAULT_VOCAB) -> list[dict]:
    """One record per trajectory: entropy series, fork data, and glyph renderings."""
    fork_of = {rec.parent_index: rec for rec, _ in group.branches}
    out = []
    for idx, tr in enumerate(group.all_trajectories):
        rec = {
            "traj": idx,
            "origin": tr.origin.to_dict(),
            "entropies": [float(h) for h in tr.entropies],
            "argmax_entropy": int(np.argmax(tr.entropies)) + 1,
            "verified": bool(tr.verified),
            "reward": float(tr.reward),
            "prompt_glyphs": vocab.render(tr.prompt),
            "response_glyphs": vocab.render(tr.tokens),
        }
        if tr.origin.is_branch:
            fork = fork_of[tr.origin.parent_index]
            rec.update(candidates=list(fork.candidate_set), t_star=fork.t_star, prefix_glyphs=vocab.render(fork.prefix))
        elif idx in fork_of:
            fork = fork_of[idx]
            rec.update(candidates=list(fork.candidate_set), t_star=fork.t_star, prefix_glyphs=vocab.render(fork.prefix))
        else:
            rec.update(candidates=[], t_star=None, prefix_glyphs="")
        out.append(rec)
    return out
