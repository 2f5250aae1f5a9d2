"""Experiential knowledge distillation (X-KD) on tiny autoregressive policies.

Modules:
    seq          vocabularies, sequences, step quadruples, datasets
    policy       tabular and neural policies, sampling
    divergence   token and point-wise divergences with gradients
    reward       Gaussian reward posterior head
    qvalue       Q-values from policies, TD errors, tabular MDP fixture
    objectives   distillation losses with analytic gradients
    trainer      SFT, generalized and black-box training loops
    oracle       exact enumeration and identity checks
    sweeps       toy tasks, metrics and sweep harnesses
    cli          ``xkd`` command-line entry point
"""
from .objectives import LossBreakdown, NonFiniteLoss, XKDConfig
from .policy import GenConfig, NeuralPolicy, TabularPolicy
from .reward import RewardPosterior, RewardPrior
from .seq import Dataset, Vocab
from .trainer import TrainConfig, TrainReport

__all__ = [
    "Dataset", "GenConfig", "LossBreakdown", "NeuralPolicy", "NonFiniteLoss", "RewardPosterior",
    "RewardPrior", "TabularPolicy", "TrainConfig", "TrainReport", "Vocab", "XKDConfig",
]
__version__ = "0.1.0"
