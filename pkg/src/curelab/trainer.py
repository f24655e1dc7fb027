"""Group filtering, advantages, clipped surrogate objectives, AdamW, training loop."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import seeding
from .branching import BranchConfig, Group, build_groups
from . import checkpoint as ckpt_io
from . import __version__
from .checkpoint import Checkpoint
from .config import Mode, RunConfig, TrainConfig
from .env import DEFAULT_VOCAB, RewardConfig, TaskInstance, Vocab, generate_task
from .policy import (
    PolicyParams,
    SamplerConfig,
    _log_softmax,
    backward,
    forward,
    init_params,
    stack_contexts,
)

log = logging.getLogger(__name__)


class BatchExhausted(RuntimeError):
    """Dynamic sampling could not collect enough informative groups."""

    def __init__(self, kept: int, needed: int, discarded: int, rounds: int):
        self.kept, self.needed, self.discarded, self.rounds = kept, needed, discarded, rounds
        super().__init__(
            f"only {kept}/{needed} informative groups after {rounds} generation rounds "
            f"({discarded} groups discarded as all-correct or all-incorrect); the policy looks degenerate"
        )


class NonFiniteObjective(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# groups -> advantages


def filter_group(group: Group) -> bool:
    """Keep iff the group mixes verified and unverified responses."""
    n_ok = group.num_verified
    return 0 < n_ok < len(group)


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(R - mean) / population std. A constant list is an error, not a zero vector."""
    R = np.asarray(rewards, dtype=float)
    if R.size < 2:
        raise ValueError("need at least two rewards to standardise")
    std = R.std()
    if std == 0.0:
        raise ValueError("rewards are constant; group should have been filtered")
    return (R - R.mean()) / std


def clipped_term(ratio, advantage, eps_low: float, eps_high: float):
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * advantage)


@dataclass
class LossEntry:
    prompt: tuple[int, ...]
    tokens: np.ndarray
    logprobs_old: np.ndarray
    advantage: float
    is_branch: bool = False


@dataclass
class LossBatch:
    entries: list[LossEntry]

    @property
    def denominator(self) -> int:
        """Response tokens only; a branch's injected prefix sits in its prompt."""
        return int(sum(len(e.tokens) for e in self.entries))

    @classmethod
    def from_groups(cls, groups: Sequence[Group], require_mixed: bool = True) -> "LossBatch":
        entries = []
        for g in groups:
            trajs = g.all_trajectories
            rewards = [t.reward for t in trajs]
            if require_mixed or np.std(rewards) > 0:
                adv = group_advantages(rewards)
            else:
                adv = np.zeros(len(trajs))  # unfiltered GRPO: constant groups carry no signal
            for t, a in zip(trajs, adv):
                entries.append(LossEntry(t.prompt, t.tokens, t.logprobs_old, float(a), t.origin.is_branch))
        return cls(entries)


# --------------------------------------------------------------------------
# objectives


@dataclass
class SurrogateResult:
    objective: float
    gradient: PolicyParams
    ratios: np.ndarray
    term_count: int
    clip_fraction: float


def _score_dlogits(P: np.ndarray, targets: np.ndarray, w: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_t w_t log softmax(z_t)[o_t]."""
    dZ = -P * w[:, None]
    dZ[np.arange(len(targets)), targets] += w
    return dZ


def surrogate(
    batch: LossBatch,
    params: PolicyParams,
    eps_low: float,
    eps_high: float,
    loss_agg: str = "token_mean",
    params_ref: PolicyParams | None = None,
    beta: float = 0.0,
    pad: int = 0,
) -> SurrogateResult:
    """Clipped surrogate (optionally minus beta*KL to a reference) and its gradient."""
    if not batch.entries:
        raise ValueError("empty loss batch")
    ctx, tgt = stack_contexts([(e.prompt, e.tokens) for e in batch.entries], params.context, pad)
    lens = np.array([len(e.tokens) for e in batch.entries])
    old = np.concatenate([e.logprobs_old for e in batch.entries])
    adv = np.repeat([e.advantage for e in batch.entries], lens)
    if loss_agg == "token_mean":
        coef = np.full(len(tgt), 1.0 / batch.denominator)
    elif loss_agg == "sequence_mean":
        coef = np.repeat(1.0 / (len(batch.entries) * lens), lens)
    else:
        raise ValueError(f"unknown loss_agg {loss_agg!r}")

    X, H, Z = forward(params, ctx)
    logp = _log_softmax(Z)
    new = logp[np.arange(len(tgt)), tgt]
    ratio = np.exp(new - old)
    if not np.all(np.isfinite(ratio)):
        pos = int(np.argmax(~np.isfinite(ratio)))
        seq = int(np.searchsorted(np.cumsum(lens), pos, side="right"))
        raise NonFiniteObjective(f"non-finite importance ratio at trajectory {seq}, token {pos - (np.cumsum(lens)[seq] - lens[seq])}")

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv
    # ties take the unclipped branch
    active = unclipped <= clipped
    terms = np.where(active, unclipped, clipped)
    objective = float(np.sum(coef * terms))
    P = np.exp(logp)
    dZ = _score_dlogits(P, tgt, coef * adv * ratio * active)

    if beta > 0.0:
        if params_ref is None:
            raise ValueError("beta > 0 needs a reference policy")
        lq = _log_softmax(forward(params_ref, ctx)[2])
        diff = logp - lq
        kl = np.sum(P * diff, axis=-1)
        objective -= beta * float(np.sum(coef * kl))
        dZ -= (beta * coef)[:, None] * P * (diff - kl[:, None])

    grad = backward(params, ctx, X, H, dZ)
    return SurrogateResult(
        objective=objective,
        gradient=grad,
        ratios=ratio,
        term_count=len(terms),
        clip_fraction=float(np.mean(~active)),
    )


def cure_objective_and_gradient(batch: LossBatch, params: PolicyParams, cfg: TrainConfig, pad: int = 0):
    """Clip-higher surrogate with the configured aggregation (token-mean by default)."""
    res = surrogate(batch, params, cfg.eps_low, cfg.eps_high, cfg.loss_agg, pad=pad)
    return res.objective, res.gradient


def grpo_objective_and_gradient(batch: LossBatch, params: PolicyParams, params_ref: PolicyParams | None, cfg: TrainConfig, pad: int = 0):
    """Symmetric clip (eps_low on both sides), per-sequence mean, optional exact-KL penalty."""
    res = surrogate(batch, params, cfg.eps_low, cfg.eps_low, "sequence_mean", params_ref, cfg.beta_kl, pad=pad)
    return res.objective, res.gradient


# --------------------------------------------------------------------------
# optimiser


def lr_at(cfg: TrainConfig, g: int) -> float:
    if cfg.warmup_steps and g < cfg.warmup_steps:
        return cfg.learning_rate * (g + 1) / cfg.warmup_steps
    return cfg.learning_rate


def clip_by_global_norm(grad: PolicyParams, max_norm: float) -> tuple[PolicyParams, float]:
    norm = grad.norm()
    if norm > max_norm:
        return grad.scale(max_norm / norm), norm
    return grad, norm


@dataclass
class AdamState:
    m: PolicyParams
    v: PolicyParams
    t: int = 0

    @classmethod
    def fresh(cls, params: PolicyParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def optimizer_step(params: PolicyParams, gradient: PolicyParams, cfg: TrainConfig, g: int, state: AdamState):
    """One AdamW update that ascends the objective whose gradient is given.

    Returns (new params, new state, pre-clip gradient norm, lr used).
    """
    if gradient.shapes() != params.shapes():
        raise ValueError("gradient shape does not match params")
    lr = lr_at(cfg, g)
    grad, norm = clip_by_global_norm(gradient, cfg.grad_clip_norm)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    t = state.t + 1
    # minimise -J
    m = state.m.map(lambda m_, g_: b1 * m_ - (1 - b1) * g_, grad)
    v = state.v.map(lambda v_, g_: b2 * v_ + (1 - b2) * g_ * g_, grad)
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = params.map(
        lambda p, m_, v_: p - lr * cfg.weight_decay * p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps),
        m,
        v,
    )
    if not new.all_finite():
        raise NonFiniteObjective(f"non-finite parameter update at step {g}")
    return new, AdamState(m, v, t), norm, lr


# --------------------------------------------------------------------------
# generation phase


def task_stream(seed: int, difficulty: int, start: int = 0, vocab: Vocab = DEFAULT_VOCAB) -> Iterator[tuple[int, TaskInstance, tuple[int, ...]]]:
    """Yields (task index, task, group coordinates) forever."""
    k = start
    while True:
        yield k, generate_task((seed, seeding.TASKS, k), difficulty, vocab), (seed, seeding.GROUPS, k)
        k += 1


def _build_chunk(args):
    return build_groups(*args)


class GroupBuilder:
    """Builds the groups of one generation round, optionally across processes.

    Results do not depend on the number of workers: every group is a pure
    function of its coordinates and the row-consistent forward pass.
    """

    def __init__(self, workers: int = 1):
        self.workers = workers
        self._pool = ProcessPoolExecutor(workers) if workers > 1 else None

    def __call__(self, params, tasks, coords, branch_cfg, sampler, reward_cfg, vocab) -> list[Group]:
        if self._pool is None or len(tasks) < 2:
            return build_groups(params, tasks, coords, branch_cfg, sampler, reward_cfg, vocab)
        bounds = np.linspace(0, len(tasks), min(self.workers, len(tasks)) + 1).astype(int)
        jobs = [
            (params, tasks[a:b], coords[a:b], branch_cfg, sampler, reward_cfg, vocab)
            for a, b in zip(bounds[:-1], bounds[1:])
        ]
        out: list[Group] = []
        for part in self._pool.map(_build_chunk, jobs):
            out.extend(part)
        return out

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


@dataclass
class FillResult:
    groups: list[Group]
    kept: int
    discarded: int
    rounds: int
    generated: list[Group] = field(default_factory=list, repr=False)


def fill_batch(
    tasks: Iterator[tuple[int, TaskInstance, tuple[int, ...]]],
    params_old: PolicyParams,
    branch_cfg: BranchConfig,
    sampler: SamplerConfig,
    reward_cfg: RewardConfig,
    train_cfg: TrainConfig,
    builder: Callable | None = None,
    vocab: Vocab = DEFAULT_VOCAB,
) -> FillResult:
    """Generate rounds of groups, drop uninformative ones, stop once B survive.

    The surplus beyond the first B kept groups is thrown away with the buffer.
    """
    builder = builder or GroupBuilder(1)
    B = train_cfg.groups_per_batch
    buffer: list[Group] = []
    generated: list[Group] = []
    discarded = 0
    for rnd in range(1, train_cfg.max_gen_batches + 1):
        batch = [next(tasks) for _ in range(train_cfg.gen_groups_per_round)]
        groups = builder(
            params_old, [t for _, t, _ in batch], [c for _, _, c in batch], branch_cfg, sampler, reward_cfg, vocab
        )
        generated.extend(groups)
        for g in groups:
            if not train_cfg.filter_groups or filter_group(g):
                buffer.append(g)
            else:
                discarded += 1
        if len(buffer) >= B:
            return FillResult(buffer[:B], len(buffer), discarded, rnd, generated)
    raise BatchExhausted(len(buffer), B, discarded, train_cfg.max_gen_batches)


# --------------------------------------------------------------------------
# training loop


STAGE_TAGS = {Mode.GRPO: "grpo", Mode.DAPO: "dapo", Mode.CURE_S1: "cure-s1", Mode.CURE_S2: "cure-s2"}


class Trainer:
    """Holds params, optimiser state and counters; one ``train_step`` per batch.

    ``step`` is the batch counter g: one theta_old snapshot, one fill_batch,
    then ``minibatches_per_batch`` AdamW updates against that snapshot.
    """

    def __init__(
        self,
        rc: RunConfig,
        mode: Mode,
        params: PolicyParams | None = None,
        step: int = 0,
        task_index: int = 0,
        builder: GroupBuilder | None = None,
    ):
        self.rc = rc
        self.vocab = rc.vocab()
        self.params = params if params is not None else init_params(
            rc.vocab_size, rc.embed_dim, rc.context, rc.hidden_dim, (rc.seed, seeding.INIT), rc.init_scale
        )
        self.params_ref = self.params.snapshot()
        self.step = step
        self.stage_step = 0
        self.task_index = task_index
        self.builder = builder or GroupBuilder(rc.workers)
        self.set_mode(mode)
        self.opt = AdamState.fresh(self.params)
        self.last_batch: FillResult | None = None
        self.last_loss_batches: list[LossBatch] = []

    def set_mode(self, mode: Mode) -> None:
        self.mode = Mode(mode)
        self.train_cfg = self.rc.train(self.mode)
        self.branch_cfg = self.rc.branch(self.mode)
        self.sampler = self.rc.sampler()
        self.reward_cfg = self.rc.reward()

    def objective_and_gradient(self, batch: LossBatch) -> SurrogateResult:
        cfg = self.train_cfg
        if self.mode is Mode.GRPO:
            return surrogate(batch, self.params, cfg.eps_low, cfg.eps_low, "sequence_mean", self.params_ref, cfg.beta_kl, self.vocab.pad)
        return surrogate(batch, self.params, cfg.eps_low, cfg.eps_high, cfg.loss_agg, pad=self.vocab.pad)

    def train_step(self) -> dict:
        params_old = self.params.snapshot()
        stream = task_stream(self.rc.seed, self.rc.difficulty, self.task_index, self.vocab)
        fill = fill_batch(
            stream, params_old, self.branch_cfg, self.sampler, self.reward_cfg, self.train_cfg, self.builder, self.vocab
        )
        self.task_index += fill.rounds * self.train_cfg.gen_groups_per_round
        self.last_batch = fill

        per_mb = self.train_cfg.groups_per_batch // self.train_cfg.minibatches_per_batch
        objs, norms, clipped = [], [], []
        lr = lr_at(self.train_cfg, self.stage_step)
        self.last_loss_batches = []
        for k in range(self.train_cfg.minibatches_per_batch):
            groups = fill.groups[k * per_mb : (k + 1) * per_mb]
            lb = LossBatch.from_groups(groups, require_mixed=self.train_cfg.filter_groups)
            self.last_loss_batches.append(lb)
            res = self.objective_and_gradient(lb)
            obj, grad = res.objective, res.gradient
            clipped.append(res.clip_fraction)
            if not np.isfinite(obj):
                raise NonFiniteObjective(f"objective is {obj} at step {self.step}")
            self.params, self.opt, norm, lr = optimizer_step(self.params, grad, self.train_cfg, self.stage_step, self.opt)
            objs.append(obj)
            norms.append(norm)

        trajs = [t for g in fill.groups for t in g.all_trajectories]
        initial = [t for g in fill.groups for t in g.initial]
        all_H = np.concatenate([t.entropies for t in trajs])
        gen_trajs = [t for g in fill.generated for t in g.all_trajectories]
        record = {
            "step": self.step,
            "stage": STAGE_TAGS[self.mode],
            "mode": self.mode.value,
            "objective": float(np.mean(objs)),
            "grad_norm": float(np.mean(norms)),
            "lr": float(lr),
            "mean_reward": float(np.mean([t.reward for t in trajs])),
            "mean_entropy": float(np.mean(all_H)),
            "mean_resp_len": float(np.mean([len(t) for t in trajs])),
            "groups_kept": fill.kept,
            "groups_discarded": fill.discarded,
            "gen_rounds_used": fill.rounds,
            "mean_entropy_initial": float(np.mean(np.concatenate([t.entropies for t in initial]))),
            "mean_resp_len_initial": float(np.mean([len(t) for t in initial])),
            "gen_accuracy": float(np.mean([t.verified for t in gen_trajs])),
            "clip_fraction": float(np.mean(clipped)),
        }
        self.step += 1
        self.stage_step += 1
        return record

    def start_stage(self, mode: Mode) -> None:
        """Switch mode mid-run (normally stage 1 -> stage 2); warmup restarts."""
        self.set_mode(mode)
        self.stage_step = 0
        if self.train_cfg.s2_reset_optimizer:
            self.opt = AdamState.fresh(self.params)
        if not self.train_cfg.s2_continue_step:
            self.step = 0

    def start_stage2(self) -> None:
        self.start_stage(Mode.CURE_S2)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.params,
            adam_m=self.opt.m,
            adam_v=self.opt.v,
            adam_t=self.opt.t,
            step=self.step,
            stage_step=self.stage_step,
            task_index=self.task_index,
            mode=self.mode.value,
            seed=self.rc.seed,
            config=self.rc.to_dict(),
        )

    def restore(self, ck: Checkpoint) -> None:
        self.params = ck.params
        self.step, self.stage_step, self.task_index = ck.step, ck.stage_step, ck.task_index
        if ck.adam_m is not None and ck.adam_v is not None:
            self.opt = AdamState(ck.adam_m, ck.adam_v, ck.adam_t)
        else:
            self.opt = AdamState.fresh(self.params)

    def close(self) -> None:
        self.builder.close()


# --------------------------------------------------------------------------
# runs


def schedule(mode: Mode, cfg: TrainConfig) -> list[tuple[Mode, int]]:
    """Phases of a run. ``cure-s1`` is the full two-stage schedule; set stage2_steps=0 for stage 1 alone."""
    mode = Mode(mode)
    if mode is Mode.CURE_S1:
        if cfg.stage2_steps == 0:
            return [(Mode.CURE_S1, cfg.stage1_steps)]
        return [(Mode.CURE_S1, cfg.stage1_steps), (Mode.CURE_S2, cfg.stage2_steps)]
    if mode is Mode.CURE_S2:
        return [(Mode.CURE_S2, cfg.stage2_steps)]
    return [(mode, cfg.stage1_steps)]


def dump_record(rec: dict) -> str:
    # repr-exact floats, so values round-trip bit for bit
    return json.dumps(rec, sort_keys=False, allow_nan=False)


def header_record(kind: str, rc: RunConfig, **extra) -> dict:
    return {
        "record": "header",
        "kind": kind,
        "version": __version__,
        "seed": rc.seed,
        "config": rc.to_dict(),
        **extra,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


@dataclass
class RunResult:
    status: str  # "completed" or "aborted"
    out_dir: Path
    metrics_path: Path
    last_checkpoint: Path
    stage_checkpoints: dict[str, Path]
    records: list[dict]
    summary: dict

    @property
    def ok(self) -> bool:
        return self.status == "completed"


def run_training(
    rc: RunConfig,
    mode: Mode | str,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    builder: GroupBuilder | None = None,
) -> RunResult:
    """Train per the stage schedule, streaming one metrics record per batch.

    Files in ``out_dir``: ``metrics.jsonl`` (header, step records, summary),
    ``summary.json``, ``ckpt_<step>.npz`` every ``checkpoint_every`` steps,
    ``<stage>.npz`` at each stage end and ``last.npz`` with the final (or last
    good) state. Exhaustion of dynamic sampling and non-finite updates end the
    run with status "aborted" instead of raising.
    """
    mode = Mode(mode)
    out = Path(out_dir if out_dir is not None else rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shapes = ckpt_io.expected_shapes(rc.vocab_size, rc.embed_dim, rc.context, rc.hidden_dim)
    parent = ckpt_io.load(resume, shapes) if resume is not None else None
    if mode is Mode.CURE_S2 and parent is None:
        log.warning("cure-s2 without a stage-1 checkpoint: starting from a fresh initialisation")

    trainer = Trainer(rc, mode, builder=builder)
    own_builder = builder is None
    phases = schedule(mode, trainer.train_cfg)
    phase_modes = [m for m, _ in phases]
    start = 0
    if parent is not None:
        trainer.restore(parent)
        pm = Mode(parent.mode)
        if pm in phase_modes:
            start = phase_modes.index(pm)
            trainer.set_mode(pm)
            if trainer.stage_step >= phases[start][1]:
                start += 1
                if start < len(phases):
                    trainer.start_stage(phases[start][0])
        else:
            trainer.start_stage(phases[0][0])

    metrics_path = out / "metrics.jsonl"
    records: list[dict] = []
    stage_ckpts: dict[str, Path] = {}
    status, error, abort_info = "completed", None, None
    parent_digest = parent.state_digest() if parent is not None else None

    def save(name: str) -> tuple[Path, str]:
        path = out / name
        return path, ckpt_io.save(path, trainer.checkpoint())

    with open(metrics_path, "w") as fh:
        fh.write(dump_record(header_record("metrics", rc, mode=mode.value, parent_checkpoint_digest=parent_digest)) + "\n")
        try:
            for p in range(start, len(phases)):
                phase_mode, n = phases[p]
                if p > start:
                    trainer.start_stage(phase_mode)
                while trainer.stage_step < n:
                    rec = {"record": "step", **trainer.train_step()}
                    records.append(rec)
                    fh.write(dump_record(rec) + "\n")
                    fh.flush()
                    if rc.checkpoint_every and trainer.step % rc.checkpoint_every == 0:
                        save(f"ckpt_{trainer.step:06d}.npz")
                stage_ckpts[phase_mode.value] = save(f"{phase_mode.value}.npz")[0]
        except BatchExhausted as exc:
            status, error = "aborted", str(exc)
            abort_info = {"kept": exc.kept, "needed": exc.needed, "discarded": exc.discarded, "rounds": exc.rounds}
        except (NonFiniteObjective, FloatingPointError) as exc:
            status, error = "aborted", str(exc)
        finally:
            if own_builder:
                trainer.close()
        last, digest = save("last.npz")
        summary = {
            "record": "summary",
            "status": status,
            "mode": mode.value,
            "steps_run": len(records),
            "next_step": trainer.step,
            "final_stage": trainer.mode.value,
            "error": error,
            "abort": abort_info,
            "last_checkpoint": last.name,
            "checkpoint_digest": digest,
            "parent_checkpoint_digest": parent_digest,
        }
        if records:
            summary["final_mean_entropy"] = records[-1]["mean_entropy"]
            summary["final_mean_reward"] = records[-1]["mean_reward"]
        fh.write(dump_record(summary) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if status != "completed":
        log.error("run aborted at step %d: %s", trainer.step, error)
    return RunResult(status, out, metrics_path, last, stage_ckpts, records, summary)
