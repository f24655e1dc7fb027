import numpy as np
import pytest

from curelab.env import DEFAULT_VOCAB, TaskInstance
from curelab.policy import PolicyParams, init_params


def small_params(seed=0, V=12, d=8, C=6, h=16, scale=0.5):
    p = init_params(V, d, C, h, (seed, 99), scale=scale)
    rng = np.random.default_rng(seed)
    return PolicyParams(p.E, p.W1, rng.normal(0, 0.3, h), p.W2, rng.normal(0, 0.3, V), C)


def constant_policy(first: int, then_eos: bool = True, vocab=DEFAULT_VOCAB, C=12, d=16, h=32):
    """Deterministic in practice: emits ``first`` then EOS (or EOS right away if first is EOS)."""
    V = vocab.size
    E = np.zeros((V, d))
    W1 = np.zeros((C * d, h))
    W2 = np.zeros((h, V))
    b2 = np.zeros(V)
    b1 = np.zeros(h)
    b2[first] = 50.0
    if then_eos and first != vocab.eos:
        E[first, 0] = 1.0
        W1[(C - 1) * d + 0, 0] = 20.0  # last slot, feature 0 -> hidden 0
        W2[0, vocab.eos] = 100.0
    return PolicyParams(E, W1, b1, W2, b2, C)


@pytest.fixture
def vocab():
    return DEFAULT_VOCAB


def task_with_answer(ans: int, vocab=DEFAULT_VOCAB, seed_path=(0,)):
    prompt = (vocab.digit(ans), vocab.equals, vocab.query)
    return TaskInstance(prompt=prompt, answer=ans, difficulty=1, seed_path=tuple(seed_path))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
