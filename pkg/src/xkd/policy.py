"""Autoregressive policies over a small vocabulary.

Two policies share one protocol (``vocab``, ``context_window``,
``dist_for_context`` and ``step_dists``):

* :class:`TabularPolicy` -- exact and enumerable, used for teachers.
* :class:`NeuralPolicy` -- a one-hidden-layer tanh network over the one-hot
  encoded context, used for students; it has analytic gradients.

The context of a state is the prompt concatenated with the prefix, truncated
to the last ``context_window`` tokens.  BOS is never emitted: its probability
is pinned to zero by every policy.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .seq import Dataset, Vocab, PROMPT_RESPONSE, TEACHER_BEHAVIOR


@dataclass(frozen=True)
class GenConfig:
    temperature: float = 1.0
    top_p: float = 0.95
    max_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")


def context_of(x, prefix, k: int) -> tuple:
    if k == 0:
        return ()
    full = tuple(x) + tuple(prefix)
    return full[-k:]


def check_dist(p, atol=1e-9) -> np.ndarray:
    """Validate a token distribution: non-negative entries summing to one."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("invalid token distribution")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"token distribution sums to {p.sum()!r}")
    return p


class TabularPolicy:
    """Lookup-table policy keyed by contexts of length <= ``context_window``.

    ``table`` maps a context tuple to ``{token_id: weight}`` with positive
    weights; ids missing from a row get probability zero.  Contexts absent
    from the table fall back to the uniform distribution over non-BOS ids.
    """

    def __init__(self, vocab: Vocab, context_window: int, table=None):
        if context_window < 0:
            raise ValueError("context_window must be non-negative")
        self.vocab = vocab
        self.context_window = context_window
        self.table = {}
        self._rows = {}
        for ctx, row in (table or {}).items():
            self.set_row(ctx, row)
        mask = vocab.action_mask
        self._uniform = mask / mask.sum()

    def set_row(self, ctx, row: dict) -> None:
        ctx = tuple(int(t) for t in ctx)
        if len(ctx) > self.context_window:
            raise ValueError(f"context {ctx} longer than window {self.context_window}")
        w = np.zeros(self.vocab.size)
        for tok, weight in row.items():
            self.vocab.check_token(tok)
            if tok == self.vocab.bos_id:
                raise ValueError("BOS cannot carry weight")
            if not weight > 0 or not math.isfinite(weight):
                raise ValueError(f"weights must be positive and finite, got {weight!r}")
            w[tok] = weight
        if not row:
            raise ValueError("empty table row")
        self.table[ctx] = {int(t): float(v) for t, v in row.items()}
        self._rows[ctx] = w / w.sum()

    def dist_for_context(self, ctx) -> np.ndarray:
        return self._rows.get(tuple(ctx), self._uniform)

    def step_dists(self, x, y) -> np.ndarray:
        k = self.context_window
        return np.stack([self.dist_for_context(context_of(x, y[: s + 1], k))
                         for s in range(len(y) - 1)]) if len(y) > 1 else np.zeros((0, self.vocab.size))

    @classmethod
    def fit(cls, vocab: Vocab, context_window: int, data: Dataset, smoothing: float = 0.1):
        """Count-based n-gram fit with additive smoothing over non-BOS ids.

        Every context seen in ``data`` gets a full-support row, so the fitted
        policy never assigns zero probability to an emittable token.
        """
        counts = {}
        for r in data.records:
            if data.kind == PROMPT_RESPONSE:
                pairs = [(r[0], r[1])]
            elif data.kind == TEACHER_BEHAVIOR:
                pairs = [(r[0], y) for y in r[1]]
            else:
                raise ValueError("fit needs responses")
            for x, y in pairs:
                for s in range(len(y) - 1):
                    ctx = context_of(x, y[: s + 1], context_window)
                    row = counts.setdefault(ctx, np.zeros(vocab.size))
                    row[y[s + 1]] += 1.0
        table = {}
        ids = np.flatnonzero(vocab.action_mask)
        for ctx, row in counts.items():
            if smoothing <= 0 and np.any(row[ids] == 0):
                table[ctx] = {int(i): row[i] for i in ids if row[i] > 0}
            else:
                table[ctx] = {int(i): row[i] + smoothing for i in ids}
        return cls(vocab, context_window, table)

    @classmethod
    def random(cls, vocab: Vocab, context_window: int, rng, concentration: float = 1.0,
               support=None):
        """Random full table: a Dirichlet row for every context of length k.

        ``support`` restricts the emitted ids (default: all non-BOS ids).
        """
        ids = list(np.flatnonzero(vocab.action_mask)) if support is None else list(support)
        table = {}
        for ctx in itertools.product(range(vocab.size), repeat=context_window):
            w = rng.dirichlet(np.full(len(ids), concentration))
            w = np.maximum(w, 1e-3)
            table[ctx] = {int(i): float(v) for i, v in zip(ids, w)}
        return cls(vocab, context_window, table)


class NeuralPolicy:
    """One-hidden-layer tanh network mapping a one-hot context to logits.

    Parameters live in one flat vector laid out as: input weights
    ``(k*V, H)`` row-major, hidden bias ``(H,)``, output weights ``(H, V)``
    row-major, output bias ``(V,)``.  Context slot ``j`` (``j = k-1`` holds the
    most recent token) uses input rows ``j*V .. j*V+V-1``; slots left empty
    by a short context contribute nothing.
    """

    def __init__(self, vocab: Vocab, context_window: int, hidden_size: int, params=None):
        if hidden_size < 1:
            raise ValueError("hidden_size must be positive")
        self.vocab = vocab
        self.context_window = context_window
        self.hidden_size = hidden_size
        n = self.param_count(vocab.size, context_window, hidden_size)
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=float)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params

    @staticmethod
    def param_count(V, k, H):
        return (k * V) * H + H + H * V + V

    @classmethod
    def init(cls, vocab, context_window, hidden_size, rng, std=0.1):
        n = cls.param_count(vocab.size, context_window, hidden_size)
        return cls(vocab, context_window, hidden_size, rng.normal(0.0, std, size=n))

    def copy(self):
        return NeuralPolicy(self.vocab, self.context_window, self.hidden_size, self.params.copy())

    def with_params(self, params):
        return NeuralPolicy(self.vocab, self.context_window, self.hidden_size, params)

    def _split(self, flat):
        V, k, H = self.vocab.size, self.context_window, self.hidden_size
        a = k * V * H
        W1 = flat[:a].reshape(k * V, H)
        b1 = flat[a:a + H]
        W2 = flat[a + H:a + H + H * V].reshape(H, V)
        b2 = flat[a + H + H * V:]
        return W1, b1, W2, b2

    def _rows(self, contexts):
        """Input-weight row indices, shape (n, k); -1 marks an empty slot."""
        k, V = self.context_window, self.vocab.size
        idx = np.full((len(contexts), k), -1, dtype=int)
        for i, ctx in enumerate(contexts):
            off = k - len(ctx)
            for j, tok in enumerate(ctx):
                idx[i, off + j] = (off + j) * V + tok
        return idx

    def _forward(self, contexts):
        W1, b1, W2, b2 = self._split(self.params)
        idx = self._rows(contexts)
        n = len(contexts)
        pre = np.broadcast_to(b1, (n, self.hidden_size)).copy()
        for j in range(self.context_window):
            col = idx[:, j]
            live = col >= 0
            pre[live] += W1[col[live]]
        h = np.tanh(pre)
        # broadcast-sum rather than matmul: rows come out identical for any n
        logits = (h[:, :, None] * W2[None, :, :]).sum(axis=1) + b2
        logits[:, self.vocab.bos_id] = -np.inf
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs, (idx, h)

    def dist_for_context(self, ctx) -> np.ndarray:
        return self._forward([tuple(ctx)])[0][0]

    def step_contexts(self, x, y):
        k = self.context_window
        return [context_of(x, y[: s + 1], k) for s in range(len(y) - 1)]

    def step_dists(self, x, y) -> np.ndarray:
        if len(y) <= 1:
            return np.zeros((0, self.vocab.size))
        return self._forward(self.step_contexts(x, y))[0]

    def forward(self, x, y):
        """Next-token distributions at every realized prefix, plus a backprop cache."""
        probs, cache = self._forward(self.step_contexts(x, y))
        return probs, cache

    def backward(self, cache, dlogits) -> np.ndarray:
        """Parameter gradient given d(loss)/d(logits) for each state row."""
        idx, h = cache
        W1, b1, W2, b2 = self._split(self.params)
        grad = np.zeros_like(self.params)
        gW1, gb1, gW2, gb2 = self._split(grad)
        dlogits = np.where(np.isfinite(dlogits), dlogits, 0.0)
        dlogits[:, self.vocab.bos_id] = 0.0
        gb2 += dlogits.sum(axis=0)
        gW2 += h.T @ dlogits
        dpre = (dlogits @ W2.T) * (1.0 - h * h)
        gb1 += dpre.sum(axis=0)
        for j in range(self.context_window):
            col = idx[:, j]
            live = col >= 0
            np.add.at(gW1, col[live], dpre[live])
        return grad


def next_dist(policy, x, prefix) -> np.ndarray:
    """Next-token distribution of ``policy`` after ``prefix`` given prompt ``x``."""
    if not prefix or prefix[0] != policy.vocab.bos_id:
        raise ValueError("prefix must start with BOS")
    return policy.dist_for_context(context_of(x, prefix, policy.context_window))


def seq_logprob(policy, x, y) -> float:
    """log policy(y | x), summed over generated tokens.

    Returns ``-inf`` (never NaN) when some realized token has probability 0;
    use :func:`math.isinf` to detect that condition.
    """
    y = policy.vocab.check_sequence(y)
    total = 0.0
    for s in range(len(y) - 1):
        p = next_dist(policy, x, y[: s + 1])[y[s + 1]]
        if p == 0.0:
            return -math.inf
        total += math.log(p)
    return total


def grad_seq_logprob(policy: NeuralPolicy, x, y) -> np.ndarray:
    y = policy.vocab.check_sequence(y)
    if len(y) == 1:
        return np.zeros_like(policy.params)
    probs, cache = policy.forward(x, y)
    d = -probs
    d[np.arange(len(y) - 1), list(y[1:])] += 1.0
    return policy.backward(cache, d)


def temper(p, temperature: float) -> np.ndarray:
    """Rescale a distribution's logits by ``1/temperature``; argmax below 1e-6."""
    p = np.asarray(p, dtype=float)
    if temperature == 1.0:
        return p
    if temperature < 1e-6:
        out = np.zeros_like(p)
        out[int(np.argmax(p))] = 1.0
        return out
    with np.errstate(divide="ignore"):
        z = np.log(p) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def nucleus(p, top_p: float) -> np.ndarray:
    """Keep the smallest high-probability prefix with mass >= top_p, renormalized."""
    if top_p >= 1.0:
        return p
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    cut = int(np.searchsorted(cum, top_p)) + 1
    out = np.zeros_like(p)
    keep = order[:cut]
    out[keep] = p[keep]
    return out / out.sum()


def draw(p, rng) -> int:
    cdf = np.cumsum(p)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if i >= len(p):
        i = int(np.flatnonzero(p)[-1])
    return i


def sample(policy, x, cfg: GenConfig, rng: Optional[np.random.Generator] = None) -> tuple:
    """Sample a response: temperature, then nucleus truncation, until EOS or max_len."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    vocab = policy.vocab
    x = vocab.check_prompt(x)
    y = [vocab.bos_id]
    for _ in range(cfg.max_len):
        p = nucleus(temper(next_dist(policy, x, y), cfg.temperature), cfg.top_p)
        tok = draw(p, rng)
        y.append(tok)
        if tok == vocab.eos_id:
            break
    return tuple(y)


def greedy(policy, x, max_len: int) -> tuple:
    vocab = policy.vocab
    y = [vocab.bos_id]
    for _ in range(max_len):
        tok = int(np.argmax(next_dist(policy, x, y)))
        y.append(tok)
        if tok == vocab.eos_id:
            break
    return tuple(y)
