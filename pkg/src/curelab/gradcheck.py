"""Central finite-difference check of the surrogate gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import seeding
from .policy import BLOCKS, PolicyParams, init_params, logprob_entropy_under
from .trainer import LossBatch, LossEntry, surrogate

STEP = 1e-5
TOLERANCE = 1e-5

# (name, loss_agg, symmetric clip, beta)
OBJECTIVES = (
    ("token_mean_clip_higher", "token_mean", False, 0.0),
    ("sequence_mean_kl", "sequence_mean", True, 0.05),
)


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=lambda: {b: 0.0 for b in BLOCKS})
    configs: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst <= TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max|a|, max|n|) over one block."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_case(rng: np.random.Generator, V: int, d: int, C: int, h: int, seed_path):
    """Params, a drifted theta_old, a reference policy and a loss batch of 2-4 sequences."""
    params = init_params(V, d, C, h, seed_path, scale=0.5)
    params = params.map(lambda a: a + 0.0)  # writable copy
    params.b1[:] = rng.normal(0, 0.3, h)
    params.b2[:] = rng.normal(0, 0.3, V)
    drift = lambda a: a + rng.normal(0, 0.05, a.shape)
    old = params.map(drift)
    ref = params.map(lambda a: a + rng.normal(0, 0.2, a.shape))
    entries = []
    for _ in range(int(rng.integers(2, 5))):
        prompt = tuple(int(x) for x in rng.integers(0, V, size=int(rng.integers(1, C + 2))))
        tokens = rng.integers(0, V, size=int(rng.integers(1, 7)))
        lp_old, _ = logprob_entropy_under(old, prompt, tokens)
        entries.append(LossEntry(prompt, tokens, lp_old, float(rng.normal()), bool(rng.integers(2))))
    return params, ref, LossBatch(entries)


def check_case(
    params: PolicyParams,
    ref: PolicyParams,
    batch: LossBatch,
    loss_agg: str,
    symmetric: bool,
    beta: float,
    corrupt: str | None = None,
) -> dict[str, float]:
    eps_low, eps_high = (0.2, 0.2) if symmetric else (0.2, 0.28)

    def J(p):
        return surrogate(batch, p, eps_low, eps_high, loss_agg, ref, beta).objective

    grad = surrogate(batch, params, eps_low, eps_high, loss_agg, ref, beta).gradient
    out = {}
    for name, arr in params.blocks():
        g_a = getattr(grad, name).copy()
        if corrupt == name:
            g_a.flat[0] += 1e-3 + abs(g_a.flat[0])
        g_n = np.zeros_like(arr)
        for i in range(arr.size):
            keep = arr.flat[i]
            arr.flat[i] = keep + STEP
            up = J(params)
            arr.flat[i] = keep - STEP
            down = J(params)
            arr.flat[i] = keep
            g_n.flat[i] = (up - down) / (2 * STEP)
        out[name] = rel_error(g_a, g_n)
    return out


def run(
    seed: int = 0,
    sizes: tuple[int, int, int, int] = (12, 8, 6, 16),
    n_configs: int = 20,
    corrupt: str | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> GradcheckReport:
    """Each config is checked under both objectives; the report keeps the per-block maximum."""
    V, d, C, h = sizes
    report = GradcheckReport()
    for c in range(n_configs):
        rng = seeding.rng_for((seed, seeding.FIXTURE, c))
        params, ref, batch = random_case(rng, V, d, C, h, (seed, seeding.FIXTURE, c, 1))
        name, agg, sym, beta = OBJECTIVES[c % len(OBJECTIVES)]
        errs = check_case(params, ref, batch, agg, sym, beta, corrupt)
        for b, e in errs.items():
            report.max_rel_error[b] = max(report.max_rel_error[b], e)
        report.configs += 1
        if progress:
            progress(c, {"objective": name, **errs})
    return report
