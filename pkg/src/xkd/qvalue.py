"""Q-values from a language policy, Boltzmann policies and TD errors.

Q-values use the non-strict inversion of the Boltzmann policy: the
log-softmax of temperature-scaled *probabilities* (not logits).  With a
``mask``, excluded ids get ``-inf`` and drop out of the normalizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .policy import next_dist


@dataclass(frozen=True)
class BoltzmannTemps:
    tau: float = 1.0
    tau_prime: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0 and self.tau_prime > 0):
            raise ValueError("Boltzmann temperatures must be positive")


def logsumexp(z) -> float:
    """Stable log-sum-exp of a 1-D vector; -inf entries are ignored."""
    m = np.max(z)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(z - m))))


class TDError(NamedTuple):
    value: float
    step_index: int


def q_from_policy(p, tau_prime: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Q_a = tau' * p_a - log sum_v exp(tau' * p_v)."""
    z = tau_prime * np.asarray(p, dtype=float)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    return z - logsumexp(z)


def q_from_policy_grad(p, tau_prime, action, mask=None) -> np.ndarray:
    """d Q_action / d p."""
    z = tau_prime * np.asarray(p, dtype=float)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    sm = np.exp(z - logsumexp(z))
    g = -tau_prime * sm
    g[action] += tau_prime
    return g


def boltzmann_policy(q, tau: float) -> np.ndarray:
    """softmax(tau * Q)."""
    z = tau * np.asarray(q, dtype=float)
    return np.exp(z - logsumexp(z))


def step_q(p_theta, x, y, tau_prime) -> np.ndarray:
    """Q-vectors at every realized prefix of ``y``, shape (n_steps, V)."""
    mask = p_theta.vocab.action_mask
    P = p_theta.step_dists(x, y)
    return np.stack([q_from_policy(P[s], tau_prime, mask) for s in range(len(P))]) \
        if len(P) else np.zeros((0, p_theta.vocab.size))


def td_errors_from_q(Q, y, gamma: float) -> np.ndarray:
    """delta_t = Q_t[y_{t+1}] - gamma * Q_{t+1}[y_{t+2}]; zero next-Q at the end."""
    n = len(y) - 1
    cur = np.array([Q[t, y[t + 1]] for t in range(n)])
    nxt = np.zeros(n)
    nxt[:-1] = cur[1:]
    return cur - gamma * nxt


def td_error(p_theta, x, y, t: int, gamma: float, tau_prime: float) -> TDError:
    """TD error for generated token ``t`` (0-based) of ``y``.

    Both Q terms come from :func:`q_from_policy` on the student's next-token
    distribution; the Q of the action after the final token is 0.
    """
    n = len(y) - 1
    if not 0 <= t < n:
        raise IndexError(f"step {t} outside 0..{n - 1}")
    mask = p_theta.vocab.action_mask
    q_cur = q_from_policy(next_dist(p_theta, x, y[: t + 1]), tau_prime, mask)[y[t + 1]]
    if t + 1 < n:
        q_next = q_from_policy(next_dist(p_theta, x, y[: t + 2]), tau_prime, mask)[y[t + 2]]
    else:
        q_next = 0.0
    return TDError(float(q_cur - gamma * q_next), t)


# --- tabular MDP fixture for the Bellman relation --------------------------

@dataclass
class TabularMDP:
    """Finite MDP; ``P[s, a, s']`` may sum to < 1 (the remainder terminates)."""

    P: np.ndarray
    R: np.ndarray
    gamma: float

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]


def chain_mdp(gamma: float, n_states: int = 4, slip: float = 0.2) -> TabularMDP:
    """Left/right chain; moving right from the last state ends the episode."""
    S, A = n_states, 2
    P = np.zeros((S, A, S))
    for s in range(S):
        left = max(s - 1, 0)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, s] += slip
        if s + 1 < S:
            P[s, 1, s + 1] += 1.0 - slip
        P[s, 1, s] += slip
    R = np.zeros((S, A))
    R[:, 0] = -0.1
    R[:, 1] = np.linspace(0.0, 1.0, S)
    return TabularMDP(P, R, gamma)


def policy_evaluation(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """Exact Q^pi by solving (I - gamma * P_pi) Q = R."""
    S, A = mdp.n_states, mdp.n_actions
    # transition over state-action pairs: (s,a) -> (s',a')
    T = np.einsum("ijk,kl->ijkl", mdp.P, pi).reshape(S * A, S * A)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * T, mdp.R.reshape(-1))
    return q.reshape(S, A)


def bellman_residuals(mdp: TabularMDP, pi: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """E_{s',a'}[Q(s,a) - gamma Q(s',a')] - R(s,a) for every state-action."""
    # terminated transitions contribute a zero next-Q
    expected_next = np.einsum("ijk,kl,kl->ij", mdp.P, pi, Q)
    return Q - mdp.gamma * expected_next - mdp.R
