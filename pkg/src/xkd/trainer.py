"""Training loops: SFT warm-up, generalized X-KD and black-box X-KD.

Each step draws from one seeded ``numpy`` generator in a fixed order, so a run
is a pure function of its inputs and seed.  The per-step branch draw
``u ~ Uniform(0, 1)`` happens in every loop that has one, including the
black-box loop where it is discarded, which keeps the random streams of
related runs aligned (e.g. X-KD with lambda = 0 against its baseline).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import objectives as obj
from .checkpoint import save_checkpoint
from .objectives import NonFiniteLoss, XKDConfig
from .policy import GenConfig, sample

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "linear")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 0.01
    lr_schedule: str = "linear"
    warmup_steps: int = 0
    seed: int = 0
    xkd: XKDConfig = field(default_factory=XKDConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


@dataclass
class OptState:
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


@dataclass
class TrainReport:
    log: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    wall_time: float = 0.0
    seed: int = 0
    theta_grads: Optional[list] = None

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.log])

    def window_means(self, window: int = 0) -> tuple[float, float]:
        """Mean total loss over the first and last ``window`` steps
        (default: a tenth of the run, at least one step)."""
        tot = self.totals()
        if len(tot) == 0:
            raise ValueError("empty training log")
        w = window or max(1, len(tot) // 10)
        return float(tot[:w].mean()), float(tot[-w:].mean())

    def descended(self, window: int = 0) -> bool:
        first, last = self.window_means(window)
        return last < first


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``step``: linear warm-up, then the schedule."""
    w = cfg.warmup_steps
    if w and step < w:
        return cfg.lr * step / w
    if cfg.lr_schedule == "constant":
        return cfg.lr
    span = cfg.steps - w
    if span <= 0:
        return cfg.lr
    return cfg.lr * max(0.0, (cfg.steps - step) / span)


def optimizer_step(params, grad, state: OptState, cfg: TrainConfig, lr: float):
    """One SGD or Adam update; returns ``(new_params, new_state)``."""
    if params.shape != grad.shape:
        raise ValueError("parameter and gradient shapes differ")
    t = state.t + 1
    if cfg.optimizer == "sgd":
        return params - lr * grad, OptState(t)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps), OptState(t, m, v)


def _clip(g, max_norm):
    """Scale ``g`` to norm ``max_norm`` (0 disables).  Student and head are
    clipped separately so the head never changes the student's update."""
    if not max_norm or g is None:
        return g
    norm = float(np.linalg.norm(g))
    return g if norm <= max_norm else g * (max_norm / norm)


def pick_response(record, rng) -> tuple:
    """A uniformly chosen stored response of a teacher-behavior record."""
    ys = record[1]
    return ys[int(rng.integers(len(ys)))]


def draw_branch(rng, alpha: float) -> str:
    return "on-policy" if rng.random() <= alpha else "offline"


class _Loop:
    """Shared optimizer/bookkeeping for the distillation loops."""

    def __init__(self, student, head, cfg: TrainConfig, *, train_head, record_grads,
                 metrics_path, checkpoint_dir, tag):
        self.student = student
        self.head = head
        self.cfg = cfg
        self.train_head = train_head and head is not None
        self.report = TrainReport(seed=cfg.seed, theta_grads=[] if record_grads else None)
        self.s_theta = OptState()
        self.s_phi = OptState()
        self.metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
        self.ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.tag = tag
        self.t0 = time.perf_counter()

    def step(self, k, branch, samples, loss_fn):
        parts, g_theta, g_phi = [], None, None
        for x, y in samples:
            try:
                lb, g = loss_fn(x, y)
            except NonFiniteLoss as e:
                raise NonFiniteLoss(f"step {k}: {e} (prompt={x}, y={y})") from None
            if not math.isfinite(lb.total):
                raise NonFiniteLoss(f"step {k}: non-finite loss on prompt={x}, y={y}")
            parts.append(lb)
            g_theta = g.theta.copy() if g_theta is None else g_theta + g.theta
            if g.phi is not None:
                g_phi = g.phi.copy() if g_phi is None else g_phi + g.phi
        n = len(samples)
        g_theta = g_theta / n
        g_phi = None if g_phi is None else g_phi / n
        if self.report.theta_grads is not None:
            self.report.theta_grads.append(g_theta.copy())
        g_theta = _clip(g_theta, self.cfg.max_grad_norm)
        g_phi = _clip(g_phi, self.cfg.max_grad_norm)
        lr = lr_at(k, self.cfg)
        self.student.params, self.s_theta = optimizer_step(
            self.student.params, g_theta, self.s_theta, self.cfg, lr)
        if self.train_head and g_phi is not None:
            self.head.params, self.s_phi = optimizer_step(
                self.head.params, g_phi, self.s_phi, self.cfg, lr)
        lb = obj.mean_breakdown(parts)
        rec = {"step": k, "branch": branch, **lb.as_dict(), "lr": lr}
        self.report.log.append(rec)
        if self.metrics:
            self.metrics.write(json.dumps(rec) + "\n")
        every = self.cfg.checkpoint_every
        if self.ckpt_dir and every and k % every == 0:
            save_checkpoint(self.ckpt_dir / f"{self.tag}-step{k}.ckpt", self.student,
                            self.head if self.train_head else None)

    def finish(self):
        if self.metrics:
            self.metrics.close()
        if self.ckpt_dir:
            self.report.checkpoint = save_checkpoint(
                self.ckpt_dir / f"{self.tag}.ckpt", self.student, self.head)
        self.report.wall_time = time.perf_counter() - self.t0
        return self.report


def sft(policy, dataset, cfg: TrainConfig, *, metrics_path=None, checkpoint_dir=None,
        record_grads=False):
    """Fine-tune ``policy`` by minimizing the mean NLL of dataset responses.

    Returns ``(policy, report)``; ``policy`` is updated in place.
    """
    if len(dataset) == 0:
        raise ValueError("SFT dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    loop = _Loop(policy, None, cfg, train_head=False, record_grads=record_grads,
                 metrics_path=metrics_path, checkpoint_dir=checkpoint_dir, tag="sft")

    def loss_fn(x, y):
        return obj.loss_seq(policy, x, y)

    for k in range(1, cfg.steps + 1):
        batch = [dataset.records[int(rng.integers(len(dataset)))] for _ in range(cfg.batch_size)]
        loop.step(k, "offline", batch, loss_fn)
    return policy, loop.finish()


def train_generalized_xkd(teacher, student, head, prompts, sft_data, cfg: TrainConfig, *,
                          experiential: bool = True, supervised: bool = False,
                          record_grads: bool = False, metrics_path=None, checkpoint_dir=None):
    """Generalized X-KD with a white-box teacher (one update per step).

    Per step: draw ``u``; if ``u <= alpha`` sample prompts and student
    responses, otherwise draw (x, y) pairs from ``sft_data``; then take one
    joint optimizer step on the student and the reward head.

    ``experiential=False`` drops the experiential term (GKD).  With
    ``supervised=True`` every batch is offline and the KD term is the forward
    token KL (supervised X-KD / supervised KD); ``u`` is still drawn.
    """
    if len(prompts) == 0 or len(sft_data) == 0:
        raise ValueError("both the prompt and the SFT dataset must be nonempty")
    x_cfg = cfg.xkd
    rng = np.random.default_rng(cfg.seed)
    loop = _Loop(student, head, cfg, train_head=experiential, record_grads=record_grads,
                 metrics_path=metrics_path, checkpoint_dir=checkpoint_dir,
                 tag=("sxkd" if supervised else "gxkd") if experiential
                 else ("skd" if supervised else "gkd"))

    if supervised:
        def loss_fn(x, y):
            if experiential:
                return obj.loss_supervised_xkd(teacher, student, head, x, y, x_cfg)
            return obj.loss_supervised_kd(teacher, student, x, y, x_cfg)
    else:
        def loss_fn(x, y):
            if experiential:
                return obj.loss_generalized_xkd(teacher, student, head, x, y, x_cfg)
            return obj.loss_gkd(teacher, student, x, y, x_cfg)

    gen = cfg.gen
    for k in range(1, cfg.steps + 1):
        branch = draw_branch(rng, 0.0 if supervised else x_cfg.alpha)
        batch = []
        for _ in range(cfg.batch_size):
            if branch == "on-policy":
                x = prompts.prompt(int(rng.integers(len(prompts))))
                batch.append((x, sample(student, x, gen, rng)))
            else:
                x, y = sft_data.records[int(rng.integers(len(sft_data)))]
                batch.append((x, y))
        loop.step(k, branch, batch, loss_fn)
    return student, head, loop.finish()


def train_blackbox_xkd(teacher_data, student, head, cfg: TrainConfig, *,
                       experiential: bool = True, record_grads: bool = False,
                       metrics_path=None, checkpoint_dir=None):
    """Sequence-level X-KD from stored teacher responses.

    Per step: draw (and discard) ``u``, then for each batch item pick a prompt
    and one of its responses uniformly; descend ``loss_seq + loss_ex``.
    ``experiential=False`` gives plain sequence-level KD.
    """
    if len(teacher_data) == 0:
        raise ValueError("teacher-behavior dataset is empty")
    x_cfg = cfg.xkd
    rng = np.random.default_rng(cfg.seed)
    loop = _Loop(student, head, cfg, train_head=experiential, record_grads=record_grads,
                 metrics_path=metrics_path, checkpoint_dir=checkpoint_dir,
                 tag="seqxkd" if experiential else "seqkd")

    def loss_fn(x, y):
        if experiential:
            return obj.loss_orm(student, head, x, y, x_cfg)
        return obj.loss_seq(student, x, y, x_cfg)

    for k in range(1, cfg.steps + 1):
        rng.random()  # unused branch draw, kept for stream alignment
        batch = []
        for _ in range(cfg.batch_size):
            rec = teacher_data.records[int(rng.integers(len(teacher_data)))]
            batch.append((rec[0], pick_response(rec, rng)))
        loop.step(k, "offline", batch, loss_fn)
    return student, head, loop.finish()
