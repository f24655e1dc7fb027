"""Tiny autoregressive policy: token embeddings -> one tanh layer -> logits.

The model sees the last ``C`` tokens of (prompt || generated so far), padded on
the left with PAD. All probability math is float64 with log-sum-exp.

Forward passes use ``np.einsum`` rather than ``@``: BLAS matmul picks different
kernels for different batch sizes, so the same row can come out with different
low-order bits depending on what it was batched with. einsum computes each row
the same way regardless, which is what makes sampling independent of batch
composition and worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeding import rng_for

BLOCKS = ("E", "W1", "b1", "W2", "b2")


class NonFiniteLogits(FloatingPointError):
    """Raised when a forward pass produces NaN/inf logits."""


@dataclass
class PolicyParams:
    E: np.ndarray  # (V, d)
    W1: np.ndarray  # (C*d, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, V)
    b2: np.ndarray  # (V,)
    context: int

    def __post_init__(self) -> None:
        V, d = self.E.shape
        h = self.b1.shape[0]
        expected = {
            "E": (V, d),
            "W1": (self.context * d, h),
            "b1": (h,),
            "W2": (h, V),
            "b2": (V,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"block {name} has shape {got}, expected {shape}")

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.E.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.b1.shape[0]

    def blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in BLOCKS:
            yield name, getattr(self, name)

    def snapshot(self) -> "PolicyParams":
        """Deep copy; used for theta_old and the reference policy."""
        return replace(self, **{name: arr.copy() for name, arr in self.blocks()})

    def zeros_like(self) -> "PolicyParams":
        return replace(self, **{name: np.zeros_like(arr) for name, arr in self.blocks()})

    def map(self, fn, *others: "PolicyParams") -> "PolicyParams":
        return replace(
            self,
            **{name: fn(arr, *(getattr(o, name) for o in others)) for name, arr in self.blocks()},
        )

    def __add__(self, other: "PolicyParams") -> "PolicyParams":
        return self.map(np.add, other)

    def scale(self, c: float) -> "PolicyParams":
        return self.map(lambda a: a * c)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for _, a in self.blocks())))

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for _, a in self.blocks())

    def equals(self, other: "PolicyParams") -> bool:
        return self.context == other.context and all(
            np.array_equal(a, getattr(other, n)) for n, a in self.blocks()
        )

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(arr.shape) for name, arr in self.blocks()}


def init_params(
    vocab_size: int = 24,
    embed_dim: int = 16,
    context: int = 12,
    hidden: int = 32,
    seed_path: Sequence[int] = (0,),
    scale: float = 0.05,
) -> PolicyParams:
    """Weights i.i.d. uniform in [-scale, scale], biases zero."""
    rng = rng_for(seed_path)
    return PolicyParams(
        E=rng.uniform(-scale, scale, size=(vocab_size, embed_dim)),
        W1=rng.uniform(-scale, scale, size=(context * embed_dim, hidden)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-scale, scale, size=(hidden, vocab_size)),
        b2=np.zeros(vocab_size),
        context=context,
    )


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 32

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


@dataclass(frozen=True)
class Origin:
    kind: str = "initial"  # "initial" | "branch"
    parent_index: int | None = None
    t_star: int | None = None
    prefix_len: int | None = None

    @property
    def is_branch(self) -> bool:
        return self.kind == "branch"

    def to_dict(self) -> dict:
        if not self.is_branch:
            return {"kind": "initial"}
        return {
            "kind": "branch",
            "parent_index": self.parent_index,
            "t_star": self.t_star,
            "prefix_len": self.prefix_len,
        }


INITIAL = Origin()


@dataclass
class Trajectory:
    prompt: tuple[int, ...]
    tokens: np.ndarray  # int64, generated tokens only
    logprobs_old: np.ndarray  # log pi_old(o_t | state) at temperature 1, untruncated
    entropies: np.ndarray  # H_t in nats, same distribution
    origin: Origin = INITIAL
    truncated: bool = False
    reward: float = 0.0
    verified: bool = False
    # tokens the verifier reads; differs from ``tokens`` only for branches
    answer_tokens: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)


# --------------------------------------------------------------------------
# forward / backward


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _check_finite(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        bad = np.argwhere(~np.isfinite(logits))
        raise NonFiniteLogits(
            f"non-finite logits at {len(bad)} entries (first at row {bad[0][0]}, token {bad[0][1]}); "
            "parameters have probably blown up"
        )


def forward(params: PolicyParams, ctx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (flattened embeddings, hidden activations, logits) for context rows."""
    n = ctx.shape[0]
    X = params.E[ctx].reshape(n, -1)
    H = np.tanh(np.einsum("nk,kh->nh", X, params.W1) + params.b1)
    Z = np.einsum("nh,hv->nv", H, params.W2) + params.b2
    _check_finite(Z)
    return X, H, Z


def backward(params: PolicyParams, ctx: np.ndarray, X: np.ndarray, H: np.ndarray, dZ: np.ndarray) -> PolicyParams:
    """Reverse accumulation of d(objective)/d(params) given d(objective)/d(logits)."""
    dW2 = H.T @ dZ
    db2 = dZ.sum(axis=0)
    dA = (dZ @ params.W2.T) * (1.0 - H * H)
    dW1 = X.T @ dA
    db1 = dA.sum(axis=0)
    dX = (dA @ params.W1.T).reshape(ctx.shape[0], params.context, params.embed_dim)
    dE = np.zeros_like(params.E)
    np.add.at(dE, ctx, dX)
    return PolicyParams(E=dE, W1=dW1, b1=db1, W2=dW2, b2=db2, context=params.context)


def left_context(seq: Sequence[int], C: int, pad: int = 0) -> np.ndarray:
    seq = list(seq)[-C:]
    return np.array([pad] * (C - len(seq)) + seq, dtype=np.int64)


def teacher_contexts(prompt: Sequence[int], tokens: Sequence[int], C: int, pad: int = 0) -> np.ndarray:
    """Row t is the window that predicts tokens[t]."""
    full = np.concatenate(
        [np.full(C, pad, dtype=np.int64), np.asarray(prompt, dtype=np.int64), np.asarray(tokens, dtype=np.int64)]
    )
    start = len(prompt)  # full[start:start+C] ends with the last prompt token
    win = sliding_window_view(full, C)
    return win[start : start + len(tokens)].copy()


def stack_contexts(items: Sequence[tuple[Sequence[int], Sequence[int]]], C: int, pad: int = 0):
    """Concatenate teacher-forced windows for many (prompt, tokens) pairs."""
    ctxs = [teacher_contexts(p, t, C, pad) for p, t in items]
    targets = [np.asarray(t, dtype=np.int64) for _, t in items]
    return np.concatenate(ctxs), np.concatenate(targets)


# --------------------------------------------------------------------------
# distributions


def step_distribution(params: PolicyParams, context: Sequence[int], temperature: float = 1.0, pad: int = 0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if len(context) == 0:
        raise ValueError("context must be nonempty")
    ctx = left_context(context, params.context, pad)[None, :]
    _, _, Z = forward(params, ctx)
    return np.exp(_log_softmax(Z[0] / temperature))


def token_entropy(dist: np.ndarray) -> float:
    dist = np.asarray(dist, dtype=float)
    nz = dist > 0
    return float(-np.sum(dist[nz] * np.log(dist[nz])))


def _entropy_rows(logp: np.ndarray) -> np.ndarray:
    return -np.sum(np.exp(logp) * logp, axis=-1)


def logprob_entropy_under(params: PolicyParams, prompt: Sequence[int], tokens: Sequence[int], pad: int = 0):
    """Teacher-forced per-position log pi(o_t | .) and entropy, temperature 1."""
    if len(tokens) == 0:
        raise ValueError("tokens must be nonempty")
    ctx = teacher_contexts(prompt, tokens, params.context, pad)
    _, _, Z = forward(params, ctx)
    logp = _log_softmax(Z)
    tok = np.asarray(tokens, dtype=np.int64)
    return logp[np.arange(len(tok)), tok], _entropy_rows(logp)


def exact_kl(p_params: PolicyParams, q_params: PolicyParams, prompt: Sequence[int], tokens: Sequence[int], pad: int = 0) -> np.ndarray:
    """KL(pi_p(.|s_t) || pi_q(.|s_t)) per position, by summation over the vocabulary."""
    if p_params.vocab_size != q_params.vocab_size:
        raise ValueError("policies disagree on vocabulary size")
    ctx = teacher_contexts(prompt, tokens, p_params.context, pad)
    lp = _log_softmax(forward(p_params, ctx)[2])
    lq = _log_softmax(forward(q_params, ctx)[2])
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def weighted_logprob_gradient(
    params: PolicyParams,
    batch: Sequence[tuple[Sequence[int], Sequence[int], Sequence[float]]],
    pad: int = 0,
) -> PolicyParams:
    """Gradient of sum_t w_t * log pi(o_t | prompt, o_<t) over a batch."""
    if not batch:
        return params.zeros_like()
    ctx, tgt = stack_contexts([(p, t) for p, t, _ in batch], params.context, pad)
    w = np.concatenate([np.asarray(ws, dtype=float) for _, _, ws in batch])
    X, H, Z = forward(params, ctx)
    P = np.exp(_log_softmax(Z))
    dZ = -P * w[:, None]
    dZ[np.arange(len(tgt)), tgt] += w
    return backward(params, ctx, X, H, dZ)


# --------------------------------------------------------------------------
# sampling


def _nucleus_pick(probs: np.ndarray, u: np.ndarray, top_p: float) -> np.ndarray:
    """Inverse-CDF draw per row; with top_p < 1 the CDF runs over the kept nucleus."""
    if top_p >= 1.0:
        cdf = np.cumsum(probs, axis=-1)
        idx = np.sum(cdf <= (u * cdf[:, -1])[:, None], axis=-1)
        return np.minimum(idx, probs.shape[1] - 1)
    order = np.argsort(-probs, axis=-1, kind="stable")
    ps = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(ps, axis=-1) - ps
    ps = np.where(before < top_p, ps, 0.0)
    cdf = np.cumsum(ps, axis=-1)
    k = np.sum(cdf <= (u * cdf[:, -1])[:, None], axis=-1)
    k = np.minimum(k, np.sum(ps > 0, axis=-1) - 1)
    return order[np.arange(len(k)), k]


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    row_coords: Sequence[Sequence[int]],
    sampler: SamplerConfig,
    eos: int = 1,
    pad: int = 0,
    origins: Sequence[Origin] | None = None,
) -> list[Trajectory]:
    """Sample one trajectory per (prompt, coords) row.

    Each row draws its uniforms from its own coordinates, so a row's output is
    the same whether it is sampled alone or alongside others.
    """
    n = len(prompts)
    if n == 0:
        return []
    T = sampler.max_new_tokens
    U = np.stack([rng_for(c).random(T) for c in row_coords])
    ctx = np.stack([left_context(p, params.context, pad) for p in prompts])
    out_tok = np.zeros((n, T), dtype=np.int64)
    out_lp = np.zeros((n, T))
    out_H = np.zeros((n, T))
    lengths = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for t in range(T):
        _, _, Z = forward(params, ctx[active])
        logp = _log_softmax(Z)
        if sampler.temperature == 1.0:
            probs = np.exp(logp)
        else:
            probs = np.exp(_log_softmax(Z / sampler.temperature))
        tok = _nucleus_pick(probs, U[active, t], sampler.top_p)
        out_tok[active, t] = tok
        out_lp[active, t] = logp[np.arange(len(active)), tok]
        out_H[active, t] = _entropy_rows(logp)
        lengths[active] = t + 1
        ctx[active, :-1] = ctx[active, 1:]
        ctx[active, -1] = tok
        active = active[tok != eos]
        if active.size == 0:
            break
    trajs = []
    for i in range(n):
        L = int(lengths[i])
        trajs.append(
            Trajectory(
                prompt=tuple(int(x) for x in prompts[i]),
                tokens=out_tok[i, :L].copy(),
                logprobs_old=out_lp[i, :L].copy(),
                entropies=out_H[i, :L].copy(),
                origin=origins[i] if origins is not None else INITIAL,
                truncated=bool(out_tok[i, L - 1] != eos),
            )
        )
    return trajs


def sample_rollouts(
    params: PolicyParams,
    prompt: Sequence[int],
    n: int,
    sampler: SamplerConfig,
    coords: Sequence[int],
    eos: int = 1,
    pad: int = 0,
) -> list[Trajectory]:
    """n trajectories from one prompt; trajectory j uses coordinates coords + (j,)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = [tuple(coords) + (j,) for j in range(n)]
    return sample_batch(params, [prompt] * n, rows, sampler, eos=eos, pad=pad)
