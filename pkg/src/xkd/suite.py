"""Identity checks run by ``xkd verify``, each on freshly drawn random instances."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import integrate

from . import objectives as obj
from .oracle import EnumSpace, verify_gseq_reform, verify_seq_reform
from .policy import NeuralPolicy, TabularPolicy
from .qvalue import bellman_residuals, chain_mdp, policy_evaluation
from .reward import RewardPosterior, RewardPrior, kl_to_prior, log_density
from .seq import Vocab


class CheckResult(NamedTuple):
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.residual < self.tol


def random_sequence(vocab: Vocab, rng, max_len: int) -> tuple:
    """BOS + up to ``max_len`` tokens; EOS-terminated with probability 1/2."""
    n = int(rng.integers(1, max_len + 1))
    body = [int(t) for t in rng.choice(vocab.content_ids, n)]
    if rng.random() < 0.5:
        body[-1] = vocab.eos_id
    return (vocab.bos_id,) + tuple(body)


def random_prompt(vocab: Vocab, rng, length: int = 2) -> tuple:
    return tuple(int(t) for t in rng.choice(vocab.content_ids, length))


def check_decomposition(n: int = 100, seed: int = 0, n_actions: int = 6, max_len: int = 4,
                        cfg: obj.XKDConfig = None) -> CheckResult:
    """max |loss_orm - (loss_seq + loss_ex)| over random instances."""
    rng = np.random.default_rng(seed)
    vocab = Vocab.with_content(n_actions - 1)
    cfg = cfg or obj.XKDConfig()
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(1, 3))
        student = NeuralPolicy.init(vocab, k, 8, rng, std=0.5)
        head = RewardPosterior.init(vocab, k, rng, std=0.5)
        x, y = random_prompt(vocab, rng), random_sequence(vocab, rng, max_len)
        orm = obj.loss_orm(student, head, x, y, cfg)[0].total
        parts = obj.loss_seq(student, x, y, cfg)[0].total + obj.loss_ex(student, head, x, y, cfg)[0].total
        worst = max(worst, abs(orm - parts))
    return CheckResult("decomposition orm = seq + ex", worst, 1e-12)


def _reform_instance(rng, vocab):
    teacher = TabularPolicy.random(vocab, 1, rng)
    a = NeuralPolicy.init(vocab, 2, 6, rng, std=1.0)
    b = TabularPolicy.random(vocab, 2, rng)
    return teacher, a, b


def check_seq_reform(n: int = 10, seed: int = 0, n_actions: int = 4, max_len: int = 3):
    rng = np.random.default_rng(seed)
    vocab = Vocab.with_content(n_actions - 1)
    worst = 0.0
    for _ in range(n):
        teacher, a, b = _reform_instance(rng, vocab)
        space = EnumSpace(vocab, max_len, random_prompt(vocab, rng))
        worst = max(worst, verify_seq_reform(teacher, a, b, space))
    return CheckResult("seq reform (theta-independent gap)", worst, 1e-9)


def check_gseq_reform(beta: float, n: int = 10, seed: int = 0, n_actions: int = 4,
                      max_len: int = 3):
    rng = np.random.default_rng(seed)
    vocab = Vocab.with_content(n_actions - 1)
    worst = 0.0
    for _ in range(n):
        teacher, a, _ = _reform_instance(rng, vocab)
        space = EnumSpace(vocab, max_len, random_prompt(vocab, rng))
        worst = max(worst, verify_gseq_reform(teacher, a, beta, space))
    return CheckResult(f"general seq reform beta={beta}", worst, 1e-9)


def check_bellman(gamma: float, seed: int = 0, n_policies: int = 5):
    """max |E[delta] - R| on the chain MDP under random full-support policies."""
    rng = np.random.default_rng(seed)
    mdp = chain_mdp(gamma)
    worst = 0.0
    for _ in range(n_policies):
        pi = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
        Q = policy_evaluation(mdp, pi)
        worst = max(worst, float(np.max(np.abs(bellman_residuals(mdp, pi, Q)))))
    return CheckResult(f"Bellman E[delta] = R gamma={gamma}", worst, 1e-9)


def check_gaussian_kl(n: int = 50, seed: int = 0):
    """Closed-form KL to the prior against numerical quadrature."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu, logvar = rng.normal(0, 1.5), rng.uniform(-2, 2)
        prior = RewardPrior(rng.normal(0, 0.5), math.exp(rng.uniform(-0.5, 0.5)))
        sd = math.exp(0.5 * logvar)

        def integrand(r):
            lq = log_density(mu, logvar, r)
            lp = log_density(prior.mean, 2 * math.log(prior.std), r)
            return math.exp(lq) * (lq - lp)
        quad, _ = integrate.quad(integrand, mu - 12 * sd, mu + 12 * sd, epsabs=1e-12, limit=200)
        worst = max(worst, abs(quad - kl_to_prior(mu, logvar, prior)))
    return CheckResult("Gaussian KL vs quadrature", worst, 1e-6)


def check_density_mass(n: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu, logvar = rng.normal(0, 1.5), rng.uniform(-2, 2)
        mass, _ = integrate.quad(lambda r: math.exp(log_density(mu, logvar, r)),
                                 -np.inf, np.inf, epsabs=1e-12)
        worst = max(worst, abs(mass - 1.0))
    return CheckResult("Gaussian density mass", worst, 1e-6)


def run_all(seed: int = 0) -> list[CheckResult]:
    out = [check_decomposition(seed=seed), check_seq_reform(seed=seed)]
    out += [check_gseq_reform(b, seed=seed) for b in (0.0, 0.5, 1.0)]
    out += [check_bellman(g, seed=seed) for g in (0.9, 1.0)]
    out += [check_gaussian_kl(seed=seed), check_density_mass(seed=seed)]
    return out
