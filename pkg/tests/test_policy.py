import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_policy, small_params
from curelab.env import DEFAULT_VOCAB
from curelab.policy import (
    PolicyParams,
    SamplerConfig,
    _nucleus_pick,
    exact_kl,
    init_params,
    logprob_entropy_under,
    sample_batch,
    sample_rollouts,
    step_distribution,
    teacher_contexts,
    token_entropy,
    weighted_logprob_gradient,
)


def zero_params(V=24, d=16, C=12, h=32):
    return init_params(V, d, C, h, (0,), scale=0.0)


def bias_only(logits, C=2):
    """A policy whose distribution is softmax(logits) in every state."""
    V = len(logits)
    return PolicyParams(np.zeros((V, 1)), np.zeros((C, 1)), np.zeros(1), np.zeros((1, V)), np.asarray(logits, float), C)


def test_zero_params_uniform():
    p = step_distribution(zero_params(), [3, 4, 5])
    np.testing.assert_allclose(p, 1 / 24, rtol=0, atol=1e-15)


def test_softmax_example():
    p = step_distribution(bias_only([math.log(3), 0, 0, 0]), [1])
    np.testing.assert_allclose(p, [0.5, 1 / 6, 1 / 6, 1 / 6], atol=1e-15)


def test_high_temperature_flattens():
    p = step_distribution(bias_only([5.0, 0, -3.0, 1.0]), [1], temperature=1e6)
    assert p.max() - p.min() < 1e-5


def test_token_entropy_examples():
    assert token_entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert token_entropy(np.array([0, 1.0, 0, 0])) == 0.0
    assert token_entropy(np.array([0.5, 0.5, 0, 0])) == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 11), min_size=1, max_size=9))
def test_distribution_normalised_and_entropy_bounded(seed, ctx):
    params = small_params(seed)
    p = step_distribution(params, ctx)
    assert abs(p.sum() - 1) <= 1e-12
    assert 0 <= token_entropy(p) <= math.log(12) + 1e-12


def test_snapshot_is_deep():
    a = small_params(1)
    b = a.snapshot()
    assert a.equals(b)
    b.E[0, 0] += 1.0
    assert not a.equals(b)


def test_init_reproducible_and_in_range():
    a = init_params(seed_path=(3, 4))
    assert a.equals(init_params(seed_path=(3, 4)))
    assert max(np.abs(a.E).max(), np.abs(a.W1).max(), np.abs(a.W2).max()) <= 0.05
    assert not a.b1.any() and not a.b2.any()


def test_rollout_shapes_and_determinism():
    params = small_params(2, V=24, d=8, C=6, h=16)
    s = SamplerConfig(max_new_tokens=10)
    a = sample_rollouts(params, (2, 12, 3, 14, 15), 3, s, (1, 2))
    b = sample_rollouts(params, (2, 12, 3, 14, 15), 3, s, (1, 2))
    assert len(a) == 3
    for x, y in zip(a, b):
        assert len(x.tokens) == len(x.logprobs_old) == len(x.entropies)
        np.testing.assert_array_equal(x.tokens, y.tokens)
        assert np.all(x.entropies >= 0) and np.all(x.entropies <= math.log(24) + 1e-12)


def test_eos_policy_stops_immediately():
    params = constant_policy(DEFAULT_VOCAB.eos)
    for t in sample_rollouts(params, (2, 14, 15), 5, SamplerConfig(), (0,)):
        assert t.tokens.tolist() == [DEFAULT_VOCAB.eos]
        assert not t.truncated


def test_row_independent_of_batch_composition():
    params = small_params(3, V=24, d=8, C=6, h=16)
    s = SamplerConfig(max_new_tokens=12, top_p=0.9, temperature=0.8)
    prompts = [(2, 14, 15), (5, 12, 7, 14, 15), (9, 13, 3, 12, 4, 14, 15)] * 3
    coords = [(5, i) for i in range(len(prompts))]
    together = sample_batch(params, prompts, coords, s)
    for i in [0, 4, 8]:
        alone = sample_batch(params, [prompts[i]], [coords[i]], s)[0]
        np.testing.assert_array_equal(alone.tokens, together[i].tokens)
        assert alone.logprobs_old.tobytes() == together[i].logprobs_old.tobytes()


@pytest.mark.parametrize("temperature,top_p", [(1.0, 1.0), (0.6, 0.7)])
def test_teacher_forcing_reproduces_stored_logprobs(temperature, top_p):
    params = small_params(4, V=24, d=8, C=6, h=16)
    for t in sample_rollouts(params, (3, 12, 4, 14, 15), 6, SamplerConfig(temperature, top_p, 20), (9,)):
        lp, H = logprob_entropy_under(params, t.prompt, t.tokens)
        np.testing.assert_allclose(lp, t.logprobs_old, rtol=0, atol=1e-10)
        np.testing.assert_allclose(H, t.entropies, rtol=0, atol=1e-12)


def test_entropy_agrees_with_step_distribution():
    params = small_params(5, V=24, d=8, C=6, h=16)
    prompt, tokens = (3, 12, 4, 14, 15), [7, 2, 16, 1]
    _, H = logprob_entropy_under(params, prompt, tokens)
    seq = list(prompt)
    for t, tok in enumerate(tokens):
        assert H[t] == pytest.approx(token_entropy(step_distribution(params, seq)), abs=1e-12)
        seq.append(tok)


def test_zero_params_logprob_uniform():
    lp, _ = logprob_entropy_under(zero_params(), (2, 14, 15), [3, 4, 1])
    np.testing.assert_allclose(lp, -math.log(24), atol=1e-15)


def test_teacher_contexts_left_padded_window():
    ctx = teacher_contexts((5, 6), [7, 8], C=3, pad=0)
    assert ctx.tolist() == [[0, 5, 6], [5, 6, 7]]


def test_nucleus_keeps_smallest_prefix_reaching_p():
    probs = np.array([[0.5, 0.3, 0.15, 0.05]])
    picks = {int(_nucleus_pick(probs, np.array([u]), 0.7)[0]) for u in np.linspace(0, 0.999, 200)}
    assert picks == {0, 1}
    picks = {int(_nucleus_pick(probs, np.array([u]), 1.0)[0]) for u in np.linspace(0, 0.999, 400)}
    assert picks == {0, 1, 2, 3}


def test_exact_kl_examples():
    p = bias_only(np.log([0.5, 0.5]))
    q = bias_only(np.log([0.25, 0.75]))
    kl = exact_kl(p, q, (0,), [1, 0])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    np.testing.assert_allclose(kl, expected, rtol=0, atol=1e-12)
    assert expected == pytest.approx(0.143841, abs=1e-6)
    np.testing.assert_array_equal(exact_kl(p, p, (0,), [1, 0]), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_kl_nonnegative_and_matches_summation(seed):
    a, b = small_params(seed), small_params(seed + 1)
    prompt, tokens = (2, 3), [4, 5, 6]
    kl = exact_kl(a, b, prompt, tokens)
    assert np.all(kl >= 0)
    seq = list(prompt)
    for t, tok in enumerate(tokens):
        pa, pb = step_distribution(a, seq), step_distribution(b, seq)
        direct = sum(x * (math.log(x) - math.log(y)) for x, y in zip(pa, pb))
        assert abs(kl[t] - direct) <= 1e-12
        seq.append(tok)


def test_weighted_gradient_zero_weights_and_additivity():
    params = small_params(6)
    a = ((2, 3), [4, 5], [0.3, -1.2])
    b = ((7,), [1, 1, 2], [0.5, 0.1, 2.0])
    z = weighted_logprob_gradient(params, [((2, 3), [4, 5], [0.0, 0.0])])
    assert z.norm() == 0.0
    ga, gb, gab = (weighted_logprob_gradient(params, x) for x in ([a], [b], [a, b]))
    for (_, x), (_, y), (_, xy) in zip(ga.blocks(), gb.blocks(), gab.blocks()):
        np.testing.assert_allclose(xy, x + y, rtol=0, atol=1e-12)


def test_weighted_gradient_single_token_finite_difference():
    params = small_params(7)
    prompt, tok, w = (2, 3, 4), [5], [1.7]
    g = weighted_logprob_gradient(params, [(prompt, tok, w)])

    def f(p):
        return w[0] * logprob_entropy_under(p, prompt, tok)[0][0]

    for name, arr in params.blocks():
        num = np.zeros_like(arr)
        for i in range(arr.size):
            keep = arr.flat[i]
            arr.flat[i] = keep + 1e-5
            up = f(params)
            arr.flat[i] = keep - 1e-5
            down = f(params)
            arr.flat[i] = keep
            num.flat[i] = (up - down) / 2e-5
        ana = getattr(g, name)
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-12)
        assert np.abs(ana - num).max() / scale <= 1e-5, name


def test_params_shape_validation():
    p = small_params(0)
    with pytest.raises(ValueError):
        PolicyParams(p.E, p.W1[:-1], p.b1, p.W2, p.b2, p.context)
