import math

import numpy as np
import pytest
from scipy import stats

from conftest import central_diff, random_seq, rel_err
from xkd.policy import (
    GenConfig,
    NeuralPolicy,
    TabularPolicy,
    grad_seq_logprob,
    greedy,
    next_dist,
    nucleus,
    sample,
    seq_logprob,
    temper,
)
from xkd.seq import Vocab


def test_param_count():
    v = Vocab.with_content(3)
    k, H = 2, 5
    assert NeuralPolicy.param_count(v.size, k, H) == k * v.size * H + H + H * v.size + v.size


def test_zero_params_uniform(vocab4):
    pol = NeuralPolicy(vocab4, 2, 4, np.zeros(NeuralPolicy.param_count(vocab4.size, 2, 4)))
    p = next_dist(pol, (0,), (vocab4.bos_id,))
    assert p[vocab4.bos_id] == 0.0
    np.testing.assert_allclose(p[vocab4.action_mask], 1 / vocab4.n_actions, rtol=0, atol=1e-15)


def test_tabular_unseen_uniform_and_hand_normalization():
    v = Vocab.with_content(2)
    pol = TabularPolicy(v, 1, {(v.bos_id,): {0: 3.0, 1: 1.0}})
    np.testing.assert_allclose(next_dist(pol, (0,), (v.bos_id,)), [0.75, 0.25, 0.0, 0.0])
    u = next_dist(pol, (0,), (v.bos_id, 1))
    np.testing.assert_allclose(u[v.action_mask], 1 / 3)
    with pytest.raises(ValueError):
        TabularPolicy(v, 1, {(0,): {0: 0.0}})


def test_next_dist_requires_bos(vocab4, tiny):
    with pytest.raises(ValueError):
        next_dist(tiny[1], (0,), (0,))


def test_dists_normalized(vocab4, tiny, rng):
    teacher, student, _ = tiny
    for _ in range(20):
        y = random_seq(vocab4, rng, 4)
        for pol in (teacher, student):
            P = pol.step_dists((1,), y)
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_seq_logprob_examples(vocab4, tiny, rng):
    bos = vocab4.bos_id
    uni = NeuralPolicy(vocab4, 1, 3, np.zeros(NeuralPolicy.param_count(vocab4.size, 1, 3)))
    assert seq_logprob(uni, (0,), (bos,)) == 0.0
    assert seq_logprob(uni, (0,), (bos, 1, 2)) == pytest.approx(2 * math.log(1 / 4), abs=1e-14)
    teacher = tiny[0]
    y = (bos, 2, 0, vocab4.eos_id)
    hand = 0.0
    for t in range(3):
        hand += math.log(next_dist(teacher, (1,), y[: t + 1])[y[t + 1]])
    assert seq_logprob(teacher, (1,), y) == hand


def test_seq_logprob_zero_prob_is_inf():
    v = Vocab.with_content(2)
    pol = TabularPolicy(v, 1, {(v.bos_id,): {0: 1.0}})
    assert seq_logprob(pol, (0,), (v.bos_id, 1)) == -math.inf


def test_grad_seq_logprob_fd(rng):
    v = Vocab.with_content(3)
    worst = 0.0
    for _ in range(20):
        pol = NeuralPolicy.init(v, 1, 5, rng, std=0.1)
        x, y = (int(rng.integers(3)),), random_seq(v, rng, 4)
        g = grad_seq_logprob(pol, x, y)
        n = central_diff(lambda p: seq_logprob(pol.with_params(p), x, y), pol.params)
        worst = max(worst, rel_err(g, n))
    assert worst < 1e-4


def test_grad_empty_and_bias(vocab4, rng):
    pol = NeuralPolicy.init(vocab4, 1, 4, rng)
    assert not np.any(grad_seq_logprob(pol, (0,), (vocab4.bos_id,)))
    y = (vocab4.bos_id, 2)
    g = grad_seq_logprob(pol, (0,), y)
    V = vocab4.size
    b2 = g[-V:]
    expect = -next_dist(pol, (0,), y[:1])
    expect[2] += 1.0
    np.testing.assert_allclose(b2, expect, atol=1e-14)


def test_temperature_and_nucleus():
    p = np.array([0.5, 0.3, 0.2, 0.0])
    assert temper(p, 1.0) is p
    np.testing.assert_array_equal(temper(p, 1e-9), [1, 0, 0, 0])
    q = temper(p, 0.5)
    np.testing.assert_allclose(q[:3], p[:3] ** 2 / np.sum(p[:3] ** 2))
    np.testing.assert_allclose(nucleus(p, 0.75), [0.5 / 0.8, 0.3 / 0.8, 0, 0])
    np.testing.assert_array_equal(nucleus(p, 1.0), p)


def test_greedy_limit_is_modal(vocab4):
    bos, eos = vocab4.bos_id, vocab4.eos_id
    pol = TabularPolicy(vocab4, 1, {(bos,): {1: 5.0, 2: 1.0}, (1,): {eos: 4.0, 0: 1.0}})
    cfg = GenConfig(temperature=1e-7, top_p=1.0, max_len=5)
    assert sample(pol, (0,), cfg) == greedy(pol, (0,), 5) == (bos, 1, eos)


def test_sampling_frequencies_match(vocab4, tiny):
    student = tiny[1]
    cfg = GenConfig(temperature=1.0, top_p=1.0, max_len=1)
    rng = np.random.default_rng(7)
    n = 100_000
    counts = np.zeros(vocab4.size)
    for _ in range(n):
        counts[sample(student, (1,), cfg, rng)[1]] += 1
    p = next_dist(student, (1,), (vocab4.bos_id,))
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sigma + 1e-12)
    # chi-square as a joint check
    keep = p > 0
    assert stats.chisquare(counts[keep], n * p[keep]).pvalue > 1e-4


def test_sampling_seeded(tiny):
    cfg = GenConfig(max_len=6, seed=11)
    assert sample(tiny[1], (1, 2), cfg) == sample(tiny[1], (1, 2), cfg)


def test_gen_config_bounds():
    for kw in ({"temperature": 0.0}, {"top_p": 0.0}, {"top_p": 1.5}, {"max_len": 0}):
        with pytest.raises(ValueError):
            GenConfig(**kw)


def test_context_truncation(vocab4, rng):
    """Prompt tokens beyond the context window do not matter."""
    pol = NeuralPolicy.init(vocab4, 2, 4, rng)
    y = (vocab4.bos_id, 1, 2)
    assert seq_logprob(pol, (0, 1), y) == seq_logprob(pol, (2, 1), y)


def test_neural_rows_batch_invariant(vocab4, rng):
    pol = NeuralPolicy.init(vocab4, 2, 4, rng)
    y = (vocab4.bos_id, 1, 2, 0)
    P = pol.step_dists((1,), y)
    for s in range(3):
        np.testing.assert_array_equal(P[s], next_dist(pol, (1,), y[: s + 1]))


def test_fit_full_support(vocab4):
    from xkd.seq import PROMPT_RESPONSE, Dataset
    bos, eos = vocab4.bos_id, vocab4.eos_id
    ds = Dataset(PROMPT_RESPONSE, [((0,), (bos, 1, eos))])
    pol = TabularPolicy.fit(vocab4, 1, ds, smoothing=0.1)
    d = next_dist(pol, (0,), (bos,))
    assert np.all(d[vocab4.action_mask] > 0)
    assert d[1] == pytest.approx(1.1 / 1.4)
