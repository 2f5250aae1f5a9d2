"""Distillation objectives with analytic gradients.

Every per-sample loss returns ``(LossBreakdown, Grads)``.  Sums run over the
generated tokens of ``y``; divergence-based KD terms are the token sums (the
point-wise average times ``|y|``), so all KD terms share a per-step scale.

The experiential term for a sample is::

    sum_t  KL(q_phi(. | s_t, a_t) || prior)  -  lam * log q_phi(delta_t | s_t, a_t)

with ``delta_t`` the TD error of Q-values obtained from the student's token
probabilities.  Gradients reach the student only through ``delta_t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import divergence as dv
from .qvalue import BoltzmannTemps, q_from_policy, q_from_policy_grad, td_errors_from_q
from .reward import (
    RewardPrior,
    add_sparse_grad,
    kl_to_prior,
    kl_to_prior_grad,
    log_density,
    log_density_grad,
    posterior_params_sparse,
)


@dataclass(frozen=True)
class XKDConfig:
    lam: float = 0.001
    gamma: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    tau: float = 1.0
    tau_prime: float = 1.0
    divergence: str = dv.SKEW
    boltzmann: bool = False
    prior: RewardPrior = field(default_factory=RewardPrior)

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        for name in ("gamma", "alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")
        BoltzmannTemps(self.tau, self.tau_prime)
        if self.divergence not in dv.MODES:
            raise ValueError(f"unknown divergence mode {self.divergence!r}")

    @property
    def temps(self) -> BoltzmannTemps:
        return BoltzmannTemps(self.tau, self.tau_prime)

    def with_(self, **kw) -> "XKDConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class LossBreakdown:
    kd_term: float
    prior_kl_term: float
    td_logdensity_term: float
    total: float
    n_steps: int

    def as_dict(self):
        return {"kd_term": self.kd_term, "prior_kl_term": self.prior_kl_term,
                "td_term": self.td_logdensity_term, "total": self.total}


class Grads(NamedTuple):
    theta: Optional[np.ndarray]
    phi: Optional[np.ndarray] = None


class NonFiniteLoss(ArithmeticError):
    """A loss hit an infinite value (a zero-probability token or support violation)."""


def mean_breakdown(parts) -> LossBreakdown:
    n = len(parts)
    return LossBreakdown(
        sum(p.kd_term for p in parts) / n,
        sum(p.prior_kl_term for p in parts) / n,
        sum(p.td_logdensity_term for p in parts) / n,
        sum(p.total for p in parts) / n,
        sum(p.n_steps for p in parts),
    )


# --- building blocks ---------------------------------------------------------

def _kd_view(probs, cfg: Optional[XKDConfig], mask):
    """Rows of the distribution the KD term scores: p_theta, or B_theta in Boltzmann mode."""
    if cfg is None or not cfg.boltzmann:
        return probs
    # B = softmax(tau * Q), Q the log-softmax of tau' * p over emittable ids
    out = np.empty_like(probs)
    for s in range(len(probs)):
        z = cfg.tau * q_from_policy(probs[s], cfg.tau_prime, mask)
        e = np.exp(z - z.max())
        out[s] = e / e.sum()
    return out


def _kd_dlogits(probs, view, g_view, cfg):
    """Chain d(loss)/d(view) back to student logits."""
    if cfg is not None and cfg.boltzmann:
        g_q = cfg.tau * cfg.tau_prime * dv.softmax_backward(view, g_view)
    else:
        g_q = g_view
    return dv.softmax_backward(probs, g_q)


def _nll_part(student, probs, y, cfg):
    n = len(y) - 1
    acts = list(y[1:])
    view = _kd_view(probs, cfg, student.vocab.action_mask)
    total = 0.0
    for s in range(n):
        pa = view[s, acts[s]]
        if pa == 0.0:
            raise NonFiniteLoss(f"token {acts[s]} at step {s} has probability 0")
        total += math.log(pa)
    if cfg is None or not cfg.boltzmann:
        d = probs.copy()
        d[np.arange(n), acts] -= 1.0
    else:
        g = np.zeros_like(view)
        g[np.arange(n), acts] = -1.0 / view[np.arange(n), acts]
        d = _kd_dlogits(probs, view, g, cfg)
    return -total, d


def _div_part(teacher, probs, x, y, beta, mode, cfg):
    n = len(y) - 1
    P = teacher.step_dists(x, y)
    view = _kd_view(probs, cfg, teacher.vocab.action_mask)
    total = 0.0
    g = np.zeros_like(view)
    for s in range(n):
        val = dv.token_div(P[s], view[s], beta, mode)
        if math.isinf(val):
            raise NonFiniteLoss(f"divergence support violation at step {s} of {y}")
        total += val
        g[s] = dv.token_div_grad_q(P[s], view[s], beta, mode)
    return total, _kd_dlogits(probs, view, g, cfg)


def _ex_part(student, head, x, y, probs, cfg: XKDConfig):
    """Experiential term: (prior_kl, td_logdensity, dlogits, grad_phi)."""
    n = len(y) - 1
    acts = list(y[1:])
    mask = student.vocab.action_mask
    Q = np.stack([q_from_policy(probs[s], cfg.tau_prime, mask) for s in range(n)])
    delta = td_errors_from_q(Q, y, cfg.gamma)
    feats = head.step_features(x, y)
    prior_kl = 0.0
    td_term = 0.0
    g_phi = np.zeros_like(head.params)
    d_delta = np.zeros(n)
    for t in range(n):
        mu, lv = posterior_params_sparse(head, feats[t])
        prior_kl += kl_to_prior(mu, lv, cfg.prior)
        td_term += log_density(mu, lv, delta[t])
        kmu, klv = kl_to_prior_grad(mu, lv, cfg.prior)
        lmu, llv, ldelta = log_density_grad(mu, lv, delta[t])
        add_sparse_grad(g_phi, head, feats[t], kmu - cfg.lam * lmu, klv - cfg.lam * llv)
        d_delta[t] = -cfg.lam * ldelta
    # delta_t = Qcur_t - gamma * Qcur_{t+1}
    d_qcur = d_delta.copy()
    d_qcur[1:] -= cfg.gamma * d_delta[:-1]
    g_probs = np.zeros_like(probs)
    for t in range(n):
        g_probs[t] = d_qcur[t] * q_from_policy_grad(probs[t], cfg.tau_prime, acts[t], mask)
    dlogits = dv.softmax_backward(probs, g_probs)
    return prior_kl, td_term, dlogits, g_phi


def _check_y(student, y):
    y = student.vocab.check_sequence(y)
    return y


def _zero_steps(student, head=None):
    lb = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0)
    return lb, Grads(np.zeros_like(student.params), None if head is None else np.zeros_like(head.params))


# --- public losses -----------------------------------------------------------

def loss_seq(student, x, y, cfg: Optional[XKDConfig] = None):
    """Sequence-level KD: negative log-likelihood of ``y`` under the student.

    With ``cfg.boltzmann`` the likelihood is taken under the Boltzmann policy
    rebuilt from the student's Q-values instead of the student itself.
    """
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student)
    probs, cache = student.forward(x, y)
    kd, d = _nll_part(student, probs, y, cfg)
    return LossBreakdown(kd, 0.0, 0.0, kd + 0.0, len(y) - 1), Grads(student.backward(cache, d))


def loss_sft(student, x, y):
    lb, g = loss_seq(student, x, y)
    return lb.total, g.theta


def loss_ex(student, head, x, y, cfg: XKDConfig):
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student, head)
    probs, cache = student.forward(x, y)
    prior_kl, td, d, g_phi = _ex_part(student, head, x, y, probs, cfg)
    ex = prior_kl - cfg.lam * td
    lb = LossBreakdown(0.0, prior_kl, td, 0.0 + ex, len(y) - 1)
    return lb, Grads(student.backward(cache, d), g_phi)


def _combine(kd, d_kd, student, head, x, y, probs, cache, cfg, experiential):
    n = len(y) - 1
    if not experiential:
        return LossBreakdown(kd, 0.0, 0.0, kd + 0.0, n), Grads(student.backward(cache, d_kd))
    prior_kl, td, d_ex, g_phi = _ex_part(student, head, x, y, probs, cfg)
    ex = prior_kl - cfg.lam * td
    lb = LossBreakdown(kd, prior_kl, td, kd + ex, n)
    return lb, Grads(student.backward(cache, d_kd + d_ex), g_phi)


def loss_orm(student, head, x, y, cfg: XKDConfig):
    """Sequence-level X-KD: ``loss_seq + loss_ex`` on a teacher sample."""
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student, head)
    probs, cache = student.forward(x, y)
    kd, d = _nll_part(student, probs, y, cfg)
    return _combine(kd, d, student, head, x, y, probs, cache, cfg, True)


def loss_supervised_kd(teacher, student, x, y, cfg: Optional[XKDConfig] = None):
    """Summed token-level KL(teacher || student) over the prefixes of ``y``."""
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student)
    probs, cache = student.forward(x, y)
    kd, d = _div_part(teacher, probs, x, y, 1.0, dv.SKEW, cfg)
    return _combine(kd, d, student, None, x, y, probs, cache, cfg, False)


def loss_supervised_xkd(teacher, student, head, x, y, cfg: XKDConfig):
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student, head)
    probs, cache = student.forward(x, y)
    kd, d = _div_part(teacher, probs, x, y, 1.0, dv.SKEW, cfg)
    return _combine(kd, d, student, head, x, y, probs, cache, cfg, True)


def loss_gkd(teacher, student, x, y, cfg: XKDConfig, mode: Optional[str] = None):
    """Summed token-level beta divergence (no experiential term)."""
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student)
    probs, cache = student.forward(x, y)
    kd, d = _div_part(teacher, probs, x, y, cfg.beta, mode or cfg.divergence, cfg)
    return _combine(kd, d, student, None, x, y, probs, cache, cfg, False)


def loss_generalized_xkd(teacher, student, head, x, y, cfg: XKDConfig, mode: Optional[str] = None):
    """Beta-divergence KD plus the experiential term on one (x, y).

    ``y`` may come from the student (on-policy); it is treated as a constant,
    so gradients flow only through the token distributions at its prefixes.
    """
    y = _check_y(student, y)
    if len(y) == 1:
        return _zero_steps(student, head)
    probs, cache = student.forward(x, y)
    kd, d = _div_part(teacher, probs, x, y, cfg.beta, mode or cfg.divergence, cfg)
    return _combine(kd, d, student, head, x, y, probs, cache, cfg, True)


def loss_reverse_seq(teacher, x, y_student) -> LossBreakdown:
    """-log teacher(y | x) for a student sample (value only, no gradient).

    The reverse and general sequence losses are evaluated exactly by
    enumeration for identity checks; they are not optimized here.
    """
    from .policy import seq_logprob

    kd = -seq_logprob(teacher, x, y_student)
    return LossBreakdown(kd, 0.0, 0.0, kd, len(y_student) - 1)


def expected_loss_seq(teacher, student, space) -> float:
    """E_{y ~ teacher}[-log student(y|x)] by exact enumeration."""
    from .oracle import enumerate_probs, sequence_logprob

    return -sum(p * sequence_logprob(student, space.prompt, y)
                for y, p in enumerate_probs(teacher, space) if p > 0)


def expected_loss_reverse_seq(teacher, student, space) -> float:
    """E_{y ~ student}[-log teacher(y|x)] by exact enumeration."""
    from .oracle import enumerate_probs, sequence_logprob

    return -sum(p * sequence_logprob(teacher, space.prompt, y)
                for y, p in enumerate_probs(student, space) if p > 0)


def loss_general_seq(teacher, student, beta: float, space) -> float:
    """beta * E[forward seq loss] + (1 - beta) * E[reverse seq loss], exact."""
    beta = dv.check_beta(beta)
    out = 0.0
    if beta > 0:
        out += beta * expected_loss_seq(teacher, student, space)
    if beta < 1:
        out += (1.0 - beta) * expected_loss_reverse_seq(teacher, student, space)
    return out
