"""Token- and sequence-level divergences between policies.

Conventions: ``0 * log(0 / q) = 0``; a positive ``p`` against a zero ``q``
gives ``math.inf`` (never NaN).  A term whose weight is exactly zero is
skipped, so ``beta`` in {0, 1} reduces to a single KL bit-for-bit.

The ``*_grad`` helpers return d(div)/d(q) on the support of ``q``; feed them
through :func:`softmax_backward` to reach student logits.
"""
from __future__ import annotations

import math

import numpy as np

SKEW = "skew"
MIXTURE = "mixture"
MODES = (SKEW, MIXTURE)


def check_beta(beta: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta!r}")
    return float(beta)


def kl_tokens(p, q) -> float:
    """KL(p || q) for two token distributions."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    live = p > 0
    if np.any(q[live] == 0):
        return math.inf
    val = float(np.sum(p[live] * (np.log(p[live]) - np.log(q[live]))))
    # clamp rounding noise on identical inputs
    return max(val, 0.0)


def beta_skew_div(p, q, beta: float) -> float:
    """beta * KL(p || q) + (1 - beta) * KL(q || p)."""
    beta = check_beta(beta)
    if beta == 1.0:
        return kl_tokens(p, q)
    if beta == 0.0:
        return kl_tokens(q, p)
    return beta * kl_tokens(p, q) + (1.0 - beta) * kl_tokens(q, p)


def mixture_jsd(p, q, beta: float) -> float:
    """beta * KL(p || m) + (1 - beta) * KL(q || m) with m = beta*p + (1-beta)*q."""
    beta = check_beta(beta)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = beta * p + (1.0 - beta) * q
    out = 0.0
    if beta > 0:
        out += beta * kl_tokens(p, m)
    if beta < 1:
        out += (1.0 - beta) * kl_tokens(q, m)
    return out


def token_div(p, q, beta: float, mode: str = SKEW) -> float:
    if mode == SKEW:
        return beta_skew_div(p, q, beta)
    if mode == MIXTURE:
        return mixture_jsd(p, q, beta)
    raise ValueError(f"unknown divergence mode {mode!r}")


# --- gradients w.r.t. the second argument q -------------------------------

def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=float), where=b > 0)


def _safe_log(a):
    return np.log(a, out=np.zeros_like(a, dtype=float), where=a > 0)


def kl_grad_q(p, q):
    """d KL(p||q) / dq."""
    return -_safe_div(np.asarray(p, float), np.asarray(q, float))


def reverse_kl_grad_q(p, q):
    """d KL(q||p) / dq on the support of q."""
    q = np.asarray(q, float)
    return np.where(q > 0, _safe_log(q) - _safe_log(np.asarray(p, float)) + 1.0, 0.0)


def token_div_grad_q(p, q, beta, mode=SKEW):
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if mode == SKEW:
        g = np.zeros_like(q)
        if beta > 0:
            g += beta * kl_grad_q(p, q)
        if beta < 1:
            g += (1.0 - beta) * reverse_kl_grad_q(p, q)
        return g
    if mode == MIXTURE:
        m = beta * p + (1.0 - beta) * q
        w = 1.0 - beta
        g = np.zeros_like(q)
        if beta > 0:
            # d/dq of beta * sum p log(p/m)
            g += -beta * w * _safe_div(p, m)
        if beta < 1:
            # d/dq of w * sum q log(q/m)
            g += w * np.where(q > 0, _safe_log(q) - _safe_log(m) + 1.0 - w * _safe_div(q, m), 0.0)
        return g
    raise ValueError(f"unknown divergence mode {mode!r}")


def softmax_backward(q, g):
    """Chain d(loss)/dq through q = softmax(z): returns d(loss)/dz."""
    q = np.asarray(q, float)
    g = np.where(q > 0, g, 0.0)
    return q * (g - np.sum(q * g, axis=-1, keepdims=True))


# --- point-wise sequence divergences ---------------------------------------

def _step_pairs(p_policy, q_policy, x, y):
    return p_policy.step_dists(x, y), q_policy.step_dists(x, y)


def pointwise_kl(p_policy, q_policy, x, y) -> float:
    """Average token-level KL over the realized prefixes of ``y``."""
    n = len(y) - 1
    if n == 0:
        return 0.0
    P, Q = _step_pairs(p_policy, q_policy, x, y)
    return sum(kl_tokens(P[s], Q[s]) for s in range(n)) / n


def pointwise_beta_div(p_policy, q_policy, x, y, beta: float, mode: str = SKEW) -> float:
    """Average token-level beta divergence over the realized prefixes of ``y``."""
    beta = check_beta(beta)
    n = len(y) - 1
    if n == 0:
        return 0.0
    P, Q = _step_pairs(p_policy, q_policy, x, y)
    return sum(token_div(P[s], Q[s], beta, mode) for s in range(n)) / n
