"""Synthetic verifiable task: left-to-right arithmetic chains mod 10.

A prompt looks like ``3 + 4 * 2 = ?``; the answer is evaluated left to right
with every intermediate reduced mod 10, so ``3 + 4 * 2`` -> ``(7 * 2) % 10 = 4``.
A response is correct when its last digit token before EOS equals the answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .seeding import rng_for

__all__ = [
    "Vocab",
    "TaskInstance",
    "RewardConfig",
    "DEFAULT_VOCAB",
    "evaluate_chain",
    "generate_task",
    "extract_answer",
    "verify",
    "overlong_penalty",
    "reward",
    "task_record",
    "write_vocab_file",
]


@dataclass(frozen=True)
class Vocab:
    """Token id layout: PAD, EOS, ten digits, two operators, ``=``, ``?``, fillers."""

    size: int = 24
    pad: int = 0
    eos: int = 1
    digit0: int = 2
    plus: int = 12
    times: int = 13
    equals: int = 14
    query: int = 15
    work0: int = 16

    def __post_init__(self) -> None:
        if not 16 <= self.size <= 64:
            raise ValueError(f"vocab size must lie in [16, 64], got {self.size}")
        named = self.named_ids()
        if len(set(named.values())) != len(named):
            raise ValueError("named token ids collide")
        if any(not 0 <= i < self.size for i in named.values()):
            raise ValueError("named token id out of range")
        if self.digit0 + 9 >= self.size:
            raise ValueError("digit block does not fit in the vocabulary")
        digit_block = set(range(self.digit0, self.digit0 + 10))
        if digit_block & {self.pad, self.eos, self.plus, self.times, self.equals, self.query}:
            raise ValueError("digit block overlaps a named id")

    def named_ids(self) -> dict[str, int]:
        return {
            "PAD": self.pad,
            "EOS": self.eos,
            "+": self.plus,
            "*": self.times,
            "=": self.equals,
            "?": self.query,
            **{str(k): self.digit0 + k for k in range(10)},
        }

    @property
    def work_ids(self) -> list[int]:
        taken = set(self.named_ids().values())
        return [i for i in range(self.work0, self.size) if i not in taken]

    def digit(self, value: int) -> int:
        return self.digit0 + value

    def is_digit(self, token: int) -> bool:
        return self.digit0 <= token < self.digit0 + 10

    def glyph(self, token: int) -> str:
        if self.is_digit(token):
            return str(token - self.digit0)
        special = {
            self.pad: "_",
            self.eos: "$",
            self.plus: "+",
            self.times: "*",
            self.equals: "=",
            self.query: "?",
        }
        if token in special:
            return special[token]
        return f"w{token - self.work0}"

    def render(self, tokens: Iterable[int]) -> str:
        return " ".join(self.glyph(int(t)) for t in tokens)


DEFAULT_VOCAB = Vocab()


@dataclass(frozen=True)
class TaskInstance:
    prompt: tuple[int, ...]
    answer: int
    difficulty: int
    seed_path: tuple[int, ...] = field(default=())


@dataclass(frozen=True)
class RewardConfig:
    max_response_len: int = 32
    overlong_buffer_len: int = 8
    overlong_penalty_factor: float = 1.0
    overlong_enabled: bool = False

    def __post_init__(self) -> None:
        if self.max_response_len < 1:
            raise ValueError("max_response_len must be positive")
        if not 0 <= self.overlong_buffer_len < self.max_response_len:
            raise ValueError(
                f"overlong_buffer_len must lie in [0, max_response_len), got "
                f"{self.overlong_buffer_len} with max_response_len={self.max_response_len}"
            )
        if self.overlong_penalty_factor < 0:
            raise ValueError("overlong_penalty_factor must be nonnegative")


def evaluate_chain(operands: Sequence[int], operators: Sequence[str]) -> int:
    """Left-to-right evaluation, reducing mod 10 after every operation."""
    if len(operators) != len(operands) - 1:
        raise ValueError("need exactly one operator between consecutive operands")
    acc = operands[0] % 10
    for op, x in zip(operators, operands[1:]):
        acc = (acc + x) % 10 if op == "+" else (acc * x) % 10
    return acc


def generate_task(seed_path: Sequence[int], difficulty: int, vocab: Vocab = DEFAULT_VOCAB) -> TaskInstance:
    if difficulty < 1:
        raise ValueError(f"difficulty must be >= 1, got {difficulty}")
    rng = rng_for(seed_path)
    operands = [int(x) for x in rng.integers(0, 10, size=difficulty)]
    operators = ["+" if b == 0 else "*" for b in rng.integers(0, 2, size=difficulty - 1)]
    prompt = [vocab.digit(operands[0])]
    for op, x in zip(operators, operands[1:]):
        prompt.append(vocab.plus if op == "+" else vocab.times)
        prompt.append(vocab.digit(x))
    prompt += [vocab.equals, vocab.query]
    return TaskInstance(
        prompt=tuple(prompt),
        answer=evaluate_chain(operands, operators),
        difficulty=difficulty,
        seed_path=tuple(int(s) for s in seed_path),
    )


def extract_answer(response: Sequence[int], vocab: Vocab = DEFAULT_VOCAB) -> int | None:
    """Last digit value before the first EOS, or None when there is none."""
    found = None
    for tok in response:
        tok = int(tok)
        if tok == vocab.eos:
            break
        if vocab.is_digit(tok):
            found = tok - vocab.digit0
    return found


def verify(gt: int, response: Sequence[int], vocab: Vocab = DEFAULT_VOCAB) -> bool:
    return extract_answer(response, vocab) == gt


def overlong_penalty(length: int, truncated: bool, cfg: RewardConfig) -> float:
    if not cfg.overlong_enabled:
        return 0.0
    F = cfg.overlong_penalty_factor
    if truncated:
        return F
    threshold = cfg.max_response_len - cfg.overlong_buffer_len
    if length <= threshold:
        return 0.0
    if length > cfg.max_response_len:
        return F
    return F * (length - threshold) / cfg.overlong_buffer_len


def reward(traj, cfg: RewardConfig) -> float:
    """Binary correctness minus the optional overlong ramp.

    ``traj`` needs ``verified``, ``tokens`` and ``truncated``; only generated
    tokens count toward the length.
    """
    base = 1.0 if traj.verified else 0.0
    return base - overlong_penalty(len(traj.tokens), traj.truncated, cfg)


def task_record(task: TaskInstance) -> dict:
    return {
        "prompt": list(task.prompt),
        "answer": task.answer,
        "difficulty": task.difficulty,
        "seed_path": list(task.seed_path),
    }


def write_vocab_file(path: str | Path, vocab: Vocab = DEFAULT_VOCAB) -> None:
    lines = [f"{i}\t{vocab.glyph(i)}" for i in range(vocab.size)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_task_records(path: str | Path) -> list[TaskInstance]:
    tasks = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "prompt" not in rec:
                continue
            tasks.append(
                TaskInstance(
                    prompt=tuple(rec["prompt"]),
                    answer=int(rec["answer"]),
                    difficulty=int(rec["difficulty"]),
                    seed_path=tuple(rec["seed_path"]),
                )
            )
    return tasks
