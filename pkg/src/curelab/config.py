"""Run configuration: one flat mapping, loaded from YAML (or JSON) and CLI overrides.

Key names follow the usual RLVR hyperparameter table where one exists
(``clip_ratio_high``, ``max_gen_batches``, ``overlong_buffer_len`` ...).
Length and batch scales are shrunk to desk size; the full-scale values can
be set from the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml

from .branching import BranchConfig
from .env import RewardConfig, Vocab
from .policy import SamplerConfig


class Mode(str, Enum):
    GRPO = "grpo"
    DAPO = "dapo"
    CURE_S1 = "cure-s1"
    CURE_S2 = "cure-s2"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.CURE_S1
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta_kl: float = 0.0
    loss_agg: str = "token_mean"
    filter_groups: bool = True
    groups_per_batch: int = 16
    minibatches_per_batch: int = 4
    gen_groups_per_round: int = 32
    max_gen_batches: int = 10
    learning_rate: float = 1e-3
    warmup_steps: int = 10
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    stage1_steps: int = 200
    stage2_steps: int = 100
    s2_reset_optimizer: bool = True
    s2_continue_step: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.eps_low <= self.eps_high < 1:
            raise ConfigError(
                f"clip bounds must satisfy 0 < eps_low <= eps_high < 1, got eps_low={self.eps_low}, eps_high={self.eps_high}"
            )
        if self.loss_agg not in ("token_mean", "sequence_mean"):
            raise ConfigError(f"loss_agg must be token_mean or sequence_mean, got {self.loss_agg!r}")
        if self.groups_per_batch < 1:
            raise ConfigError("groups_per_batch must be >= 1")
        if self.minibatches_per_batch < 1 or self.groups_per_batch % self.minibatches_per_batch:
            raise ConfigError(
                f"minibatches_per_batch={self.minibatches_per_batch} must divide groups_per_batch={self.groups_per_batch}"
            )
        if self.gen_groups_per_round < 1 or self.max_gen_batches < 1:
            raise ConfigError("gen_groups_per_round and max_gen_batches must be >= 1")
        if self.beta_kl < 0:
            raise ConfigError("beta_kl must be nonnegative")
        if self.learning_rate <= 0 or self.warmup_steps < 0 or self.weight_decay < 0 or self.grad_clip_norm <= 0:
            raise ConfigError("invalid optimizer settings")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ConfigError("invalid Adam moments settings")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("stage lengths must be nonnegative")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 16
    temperature: float = 0.6
    top_p: float = 0.7
    task_count: int = 200
    difficulty: int = 3
    seed: int = 12345

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.task_count < 1:
            raise ConfigError("task_count must be >= 1")
        if not self.temperature > 0 or not 0 < self.top_p <= 1:
            raise ConfigError("eval temperature must be > 0 and top_p in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = 0
    label: str = "run"
    out_dir: str = "runs"
    workers: int = 1
    checkpoint_every: int = 50
    # model
    vocab_size: int = 24
    embed_dim: int = 16
    context: int = 12
    hidden_dim: int = 32
    init_scale: float = 0.05
    # task
    difficulty: int = 3
    # rollout
    temperature: float = 1.0
    top_p: float = 1.0
    max_resp_len: int = 32
    n_responses_per_prompt: int = 16
    initial_rollouts: int = 4
    reprompt_rollouts: int = 3
    topk_entropy: int = 20
    # reward
    overlong_buffer: bool = False
    overlong_buffer_len: int = 8
    penalty_factor: float = 1.0
    # optimisation
    lr: float = 1e-3
    warmup_steps: int = 10
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss_agg_mode: str = "token_mean"
    clip_ratio_low: float = 0.2
    clip_ratio_high: float = 0.28
    grpo_clip_ratio: float = 0.2
    kl_coeff: float = 0.0
    train_groups: int = 16
    mini_batches: int = 4
    gen_groups: int = 32
    max_gen_batches: int = 10
    stage1_steps: int = 200
    stage2_steps: int = 100
    s2_reset_optimizer: bool = True
    s2_continue_step: bool = True
    # evaluation
    eval_k: int = 16
    eval_temperature: float = 0.6
    eval_top_p: float = 0.7
    eval_tasks: int = 200
    eval_seed: int = 12345

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.difficulty < 1:
            raise ConfigError("difficulty must be >= 1")
        if self.seed < 0 or self.eval_seed < 0:
            raise ConfigError("seeds must be nonnegative")
        if min(self.embed_dim, self.context, self.hidden_dim) < 1 or self.init_scale < 0:
            raise ConfigError("model dimensions must be positive")
        if self.initial_rollouts * (1 + self.reprompt_rollouts) != self.n_responses_per_prompt:
            raise ConfigError(
                f"initial_rollouts * (1 + reprompt_rollouts) = "
                f"{self.initial_rollouts * (1 + self.reprompt_rollouts)} must equal n_responses_per_prompt="
                f"{self.n_responses_per_prompt}"
            )
        if not 0 < self.grpo_clip_ratio < 1:
            raise ConfigError("grpo_clip_ratio must lie in (0, 1)")
        # re-run every member validator so bad values fail at load time
        try:
            self.vocab()
            self.sampler()
            self.reward()
            self.eval_config()
            for mode in Mode:
                self.branch(mode)
                self.train(mode)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ---- member configs

    def vocab(self) -> Vocab:
        return Vocab(size=self.vocab_size)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(temperature=self.temperature, top_p=self.top_p, max_new_tokens=self.max_resp_len)

    def reward(self) -> RewardConfig:
        return RewardConfig(
            max_response_len=self.max_resp_len,
            overlong_buffer_len=self.overlong_buffer_len,
            overlong_penalty_factor=self.penalty_factor,
            overlong_enabled=self.overlong_buffer,
        )

    def branch(self, mode: Mode) -> BranchConfig:
        """Only stage 1 re-prompts; every other mode samples the full group from q."""
        if Mode(mode) is Mode.CURE_S1:
            return BranchConfig(n1=self.initial_rollouts, n2=self.reprompt_rollouts, top_k=self.topk_entropy)
        return BranchConfig(n1=self.n_responses_per_prompt, n2=0, top_k=self.topk_entropy)

    def train(self, mode: Mode) -> TrainConfig:
        mode = Mode(mode)
        grpo = mode is Mode.GRPO
        return TrainConfig(
            mode=mode,
            eps_low=self.grpo_clip_ratio if grpo else self.clip_ratio_low,
            eps_high=self.grpo_clip_ratio if grpo else self.clip_ratio_high,
            beta_kl=self.kl_coeff if grpo else 0.0,
            loss_agg="sequence_mean" if grpo else self.loss_agg_mode,
            filter_groups=not grpo,
            groups_per_batch=self.train_groups,
            minibatches_per_batch=self.mini_batches,
            gen_groups_per_round=self.gen_groups,
            max_gen_batches=self.max_gen_batches,
            learning_rate=self.lr,
            warmup_steps=self.warmup_steps,
            weight_decay=self.weight_decay,
            grad_clip_norm=self.grad_clip,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_epsilon=self.adam_epsilon,
            stage1_steps=self.stage1_steps,
            stage2_steps=self.stage2_steps,
            s2_reset_optimizer=self.s2_reset_optimizer,
            s2_continue_step=self.s2_continue_step,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            k=self.eval_k,
            temperature=self.eval_temperature,
            top_p=self.eval_top_p,
            task_count=self.eval_tasks,
            difficulty=self.difficulty,
            seed=self.eval_seed,
        )

    # ---- (de)serialisation

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {}
    for key, value in data.items():
        typ = known[key].type
        try:
            if typ == "bool" and isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            elif typ in ("int", "float", "str", "bool"):
                value = {"int": int, "float": float, "str": str, "bool": bool}[typ](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
        coerced[key] = value
    return RunConfig(**coerced)


def load(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) if text.strip() else {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(loaded)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
