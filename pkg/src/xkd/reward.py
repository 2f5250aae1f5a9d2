"""Gaussian reward posterior over state-action pairs, its prior and gradients.

Features for the reward after step ``t`` are the one-hot codes of the
``k`` context tokens preceding the action followed by the one-hot action,
so ``F = (k + 1) * V``.  The posterior is a linear Gaussian head::

    mu     = w_mu . f + b_mu
    logvar = w_logvar . f + b_logvar
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .policy import context_of
from .seq import Vocab

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RewardPrior:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("prior std must be positive")


class RewardPosterior:
    """Linear Gaussian head; flat params ordered (w_mu, b_mu, w_logvar, b_logvar)."""

    def __init__(self, vocab: Vocab, context_window: int, params=None):
        self.vocab = vocab
        self.context_window = context_window
        n = 2 * self.n_features + 2
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=float)
        if params.shape != (n,):
            raise ValueError(f"expected {n} head parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("head parameters must be finite")
        self.params = params

    @property
    def n_features(self) -> int:
        return (self.context_window + 1) * self.vocab.size

    @classmethod
    def init(cls, vocab, context_window, rng, std=0.1):
        F = (context_window + 1) * vocab.size
        return cls(vocab, context_window, rng.normal(0.0, std, size=2 * F + 2))

    def copy(self):
        return RewardPosterior(self.vocab, self.context_window, self.params.copy())

    @property
    def w_mu(self):
        return self.params[: self.n_features]

    @property
    def b_mu(self):
        return self.params[self.n_features]

    @property
    def w_logvar(self):
        F = self.n_features
        return self.params[F + 1: 2 * F + 1]

    @property
    def b_logvar(self):
        return self.params[2 * self.n_features + 1]

    def feature_index(self, x, prefix, action) -> list[int]:
        """Active feature indices for taking ``action`` after ``prefix``."""
        k, V = self.context_window, self.vocab.size
        ctx = context_of(x, prefix, k)
        off = k - len(ctx)
        idx = [(off + j) * V + tok for j, tok in enumerate(ctx)]
        idx.append(k * V + int(action))
        return idx

    def features(self, x, prefix, action) -> np.ndarray:
        f = np.zeros(self.n_features)
        f[self.feature_index(x, prefix, action)] = 1.0
        return f

    def step_features(self, x, y) -> list[list[int]]:
        return [self.feature_index(x, y[: t + 1], y[t + 1]) for t in range(len(y) - 1)]


def posterior_params(head: RewardPosterior, feat) -> tuple[float, float]:
    feat = np.asarray(feat, dtype=float)
    if feat.shape != (head.n_features,):
        raise ValueError(f"feature dimension {feat.shape} != ({head.n_features},)")
    mu = float(head.w_mu @ feat + head.b_mu)
    logvar = float(head.w_logvar @ feat + head.b_logvar)
    return mu, logvar


def posterior_params_sparse(head: RewardPosterior, idx) -> tuple[float, float]:
    """Same as :func:`posterior_params` for a one-hot feature given by indices."""
    mu = float(head.w_mu[idx].sum() + head.b_mu)
    logvar = float(head.w_logvar[idx].sum() + head.b_logvar)
    return mu, logvar


def kl_to_prior(mu: float, logvar: float, prior: RewardPrior = RewardPrior()) -> float:
    """KL(N(mu, exp(logvar)) || N(prior.mean, prior.std**2)), closed form."""
    s2 = prior.std ** 2
    return 0.5 * (math.exp(logvar) / s2 + (mu - prior.mean) ** 2 / s2
                  - 1.0 - logvar + math.log(s2))


def kl_to_prior_grad(mu, logvar, prior: RewardPrior = RewardPrior()):
    """(dKL/dmu, dKL/dlogvar)."""
    s2 = prior.std ** 2
    return (mu - prior.mean) / s2, 0.5 * (math.exp(logvar) / s2 - 1.0)


def log_density(mu: float, logvar: float, value: float) -> float:
    return -0.5 * (LOG_2PI + logvar + (value - mu) ** 2 * math.exp(-logvar))


def log_density_grad(mu, logvar, value):
    """(d/dmu, d/dlogvar, d/dvalue) of :func:`log_density`."""
    r = (value - mu) * math.exp(-logvar)
    return r, -0.5 + 0.5 * (value - mu) * r, -r


def _chain(head, feat, dmu, dlogvar):
    feat = np.asarray(feat, dtype=float)
    F = head.n_features
    g = np.zeros_like(head.params)
    g[:F] = dmu * feat
    g[F] = dmu
    g[F + 1: 2 * F + 1] = dlogvar * feat
    g[2 * F + 1] = dlogvar
    return g


def grad_head(head: RewardPosterior, feat, value: float, prior: RewardPrior = RewardPrior()):
    """Head-parameter gradients of ``kl_to_prior`` and ``log_density`` at ``feat``.

    Returns ``(grad_kl, grad_logdensity)``, both flat vectors shaped like
    ``head.params``.
    """
    mu, logvar = posterior_params(head, feat)
    g_kl = _chain(head, feat, *kl_to_prior_grad(mu, logvar, prior))
    dmu, dlv, _ = log_density_grad(mu, logvar, value)
    g_ld = _chain(head, feat, dmu, dlv)
    return g_kl, g_ld


def add_sparse_grad(grad, head: RewardPosterior, idx, dmu, dlogvar) -> None:
    """Accumulate a chain-rule gradient for a one-hot feature into ``grad``."""
    F = head.n_features
    np.add.at(grad, idx, dmu)
    grad[F] += dmu
    np.add.at(grad, [F + 1 + i for i in idx], dlogvar)
    grad[2 * F + 1] += dlogvar
