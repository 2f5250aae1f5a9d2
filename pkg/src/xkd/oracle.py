"""Exact enumeration of tiny sequence spaces and the checks built on it.

The enumerated outcomes are every sequence that ends in EOS within
``max_len`` generated tokens plus every length-``max_len`` sequence without
EOS (kept as a truncated outcome), so the outcome probabilities sum to one.
Zero-probability branches are pruned.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .divergence import check_beta
from .policy import GenConfig, context_of, sample, seq_logprob
from .seq import Vocab, expand_quadruples

BUDGET = 10 ** 7


class SupportViolation(ArithmeticError):
    """A divergence is infinite because one distribution leaves the other's support."""


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class EnumSpace:
    vocab: Vocab
    max_len: int
    prompt: tuple

    def __post_init__(self):
        if self.vocab.size ** self.max_len > BUDGET:
            raise BudgetExceeded(
                f"{self.vocab.size}^{self.max_len} sequences exceed the budget of {BUDGET}")
        object.__setattr__(self, "prompt", self.vocab.check_prompt(self.prompt))


class Memo:
    """Read-only view of a policy that caches next-token distributions by context."""

    def __init__(self, policy):
        if isinstance(policy, Memo):
            policy = policy.policy
        self.policy = policy
        self.vocab = policy.vocab
        self.context_window = policy.context_window
        self._cache = {}

    def dist_for_context(self, ctx):
        ctx = tuple(ctx)
        d = self._cache.get(ctx)
        if d is None:
            d = self._cache[ctx] = self.policy.dist_for_context(ctx)
        return d

    def step_dists(self, x, y):
        k = self.context_window
        if len(y) <= 1:
            return np.zeros((0, self.vocab.size))
        return np.stack([self.dist_for_context(context_of(x, y[: s + 1], k))
                         for s in range(len(y) - 1)])


def enumerate_probs(policy, space: EnumSpace) -> list[tuple[tuple, float]]:
    """All outcomes of ``policy`` on ``space`` with their probabilities."""
    pol = Memo(policy)
    vocab, x, L = space.vocab, space.prompt, space.max_len
    k = pol.context_window
    out = []
    stack = [((vocab.bos_id,), 1.0)]
    while stack:
        y, p = stack.pop()
        if len(y) - 1 == L or y[-1] == vocab.eos_id and len(y) > 1:
            out.append((y, p))
            continue
        dist = pol.dist_for_context(context_of(x, y, k))
        for tok in range(vocab.size - 1, -1, -1):
            if dist[tok] > 0:
                stack.append((y + (tok,), p * float(dist[tok])))
    out.sort(key=lambda item: item[0])
    return out


def exact_expectation(policy, space: EnumSpace, f: Callable) -> float:
    """sum_y policy(y) * f(y) over the enumerated outcomes."""
    return float(sum(p * f(y) for y, p in enumerate_probs(policy, space)))


def sequence_logprob(policy, x, y) -> float:
    return seq_logprob(policy if isinstance(policy, Memo) else Memo(policy), x, y)


def seq_entropy(policy, space: EnumSpace) -> float:
    """-sum_y p(y) log p(y), from the enumerated probabilities."""
    return -sum(p * math.log(p) for _, p in enumerate_probs(policy, space) if p > 0)


def exact_seq_kl(p_policy, q_policy, space: EnumSpace) -> float:
    """Sequence-level KL(p || q) from two independent enumerations."""
    qs = dict(enumerate_probs(q_policy, space))
    total = 0.0
    for y, p in enumerate_probs(p_policy, space):
        q = qs.get(y, 0.0)
        if q == 0.0:
            return math.inf
        total += p * (math.log(p) - math.log(q))
    return total


def _finite(val, what):
    if math.isinf(val):
        raise SupportViolation(f"{what} is infinite")
    return val


def seq_reform_terms(teacher, student, space: EnumSpace) -> dict:
    """Both sides of: E_pi[-log B(y)] - KL(pi || B) = -E_pi[log pi(y)]."""
    m_student = Memo(student)
    l_seq = exact_expectation(teacher, space,
                              lambda y: -sequence_logprob(m_student, space.prompt, y))
    kl = _finite(exact_seq_kl(teacher, student, space), "KL(teacher || student)")
    return {"l_seq": l_seq, "kl": kl, "gap": l_seq - kl,
            "teacher_entropy": seq_entropy(teacher, space)}


def verify_seq_reform(teacher, theta_a, theta_b, space: EnumSpace) -> float:
    """|gap(theta_a) - gap(theta_b)| where gap = L_seq - KL; it should vanish."""
    ga = seq_reform_terms(teacher, theta_a, space)["gap"]
    gb = seq_reform_terms(teacher, theta_b, space)["gap"]
    return abs(ga - gb)


def gseq_reform_sides(teacher, student, beta: float, space: EnumSpace) -> tuple[float, float]:
    """(LHS, RHS) of the general sequence-loss decomposition.

    LHS = beta * E_pi[-log B] + (1 - beta) * E_B[-log pi]
    RHS = beta * KL(pi||B) + (1 - beta) * KL(B||pi)
          - beta * E_pi[log pi] - (1 - beta) * E_B[log B]
    """
    beta = check_beta(beta)
    x = space.prompt
    mt, ms = Memo(teacher), Memo(student)
    lhs = rhs = 0.0
    if beta > 0:
        lhs += beta * exact_expectation(mt, space, lambda y: -sequence_logprob(ms, x, y))
        rhs += beta * _finite(exact_seq_kl(mt, ms, space), "KL(teacher || student)")
        rhs += beta * seq_entropy(mt, space)
    if beta < 1:
        lhs += (1 - beta) * exact_expectation(ms, space, lambda y: -sequence_logprob(mt, x, y))
        rhs += (1 - beta) * _finite(exact_seq_kl(ms, mt, space), "KL(student || teacher)")
        rhs += (1 - beta) * seq_entropy(ms, space)
    return lhs, rhs


def verify_gseq_reform(teacher, student, beta: float, space: EnumSpace) -> float:
    lhs, rhs = gseq_reform_sides(teacher, student, beta, space)
    return abs(lhs - rhs)


class MCEstimate(NamedTuple):
    mc_mean: float
    exact: float
    stderr: float  # NaN when n_samples < 2

    @property
    def stderr_defined(self) -> bool:
        return not math.isnan(self.stderr)

    def within(self, n_sigma: float = 4.0) -> bool:
        if not self.stderr_defined:
            return False
        if self.stderr == 0.0:
            return self.mc_mean == self.exact
        return abs(self.mc_mean - self.exact) < n_sigma * self.stderr


def mc_vs_exact(policy, space: EnumSpace, f: Callable, n_samples: int, seed: int) -> MCEstimate:
    """Monte-Carlo mean of ``f`` under ``policy`` against the exact expectation."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    pol = Memo(policy)
    rng = np.random.default_rng(seed)
    cfg = GenConfig(temperature=1.0, top_p=1.0, max_len=space.max_len, seed=seed)
    counts = Counter(sample(pol, space.prompt, cfg, rng) for _ in range(n_samples))
    vals = {y: float(f(y)) for y in counts}
    w = np.array([counts[y] for y in vals], dtype=float)
    v = np.array(list(vals.values()))
    mean = float(np.sum(w * v) / n_samples)
    if n_samples < 2:
        stderr = math.nan
    else:
        var = float(np.sum(w * (v - mean) ** 2) / (n_samples - 1))
        stderr = math.sqrt(var / n_samples)
    return MCEstimate(mean, exact_expectation(pol, space, f), stderr)


def quadruple_sum(x, y, f: Callable, vocab: Vocab) -> float:
    """sum of f(s, a, s', a') over the expanded quadruples of (x, y)."""
    total = 0.0
    for q in expand_quadruples(x, y, vocab):
        total += f(q.s, q.a, q.s_next, q.a_next)
    return total


def indexed_sum(x, y, f: Callable) -> float:
    """The same sum written with explicit time indices over y."""
    x, y = tuple(x), tuple(y)
    total = 0.0
    for t in range(1, len(y)):
        a_next = y[t + 1] if t + 1 < len(y) else None
        total += f((x, y[:t]), y[t], (x, y[: t + 1]), a_next)
    return total
