import numpy as np
import pytest

from xkd.policy import NeuralPolicy, TabularPolicy
from xkd.reward import RewardPosterior
from xkd.seq import Vocab


def central_diff(f, params, h=1e-5):
    g = np.zeros_like(params)
    for i in range(len(params)):
        p = params.copy()
        p[i] += h
        up = f(p)
        p[i] -= 2 * h
        g[i] = (up - f(p)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_seq(vocab, rng, max_len):
    n = int(rng.integers(1, max_len + 1))
    body = [int(t) for t in rng.choice(vocab.content_ids, n)]
    if rng.random() < 0.5:
        body[-1] = vocab.eos_id
    return (vocab.bos_id,) + tuple(body)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab4():
    """Four emittable ids: three content tokens plus EOS."""
    return Vocab.with_content(3)


@pytest.fixture
def tiny(vocab4, rng):
    """(teacher, student, head) on a four-action vocabulary."""
    teacher = TabularPolicy.random(vocab4, 2, rng)
    student = NeuralPolicy.init(vocab4, 2, 6, rng, std=0.5)
    head = RewardPosterior.init(vocab4, 2, rng, std=0.5)
    return teacher, student, head


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
