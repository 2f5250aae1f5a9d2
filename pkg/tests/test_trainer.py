import json
import math

import numpy as np
import pytest

from xkd import trainer
from xkd.objectives import NonFiniteLoss, XKDConfig
from xkd.policy import GenConfig, NeuralPolicy, TabularPolicy, seq_logprob
from xkd.reward import RewardPosterior
from xkd.seq import PROMPT_ONLY, PROMPT_RESPONSE, TEACHER_BEHAVIOR, Dataset, Vocab

V = Vocab.with_content(3)
B, E = V.bos_id, V.eos_id


class CountingList(list):
    def __init__(self, *a):
        super().__init__(*a)
        self.reads = 0

    def __getitem__(self, i):
        self.reads += 1
        return super().__getitem__(i)


def data(rng, n=12):
    recs = []
    for _ in range(n):
        x = tuple(int(t) for t in rng.integers(0, 3, 2))
        recs.append((x, (B,) + x + (E,)))
    return Dataset(PROMPT_RESPONSE, recs)


def setup(seed=0):
    rng = np.random.default_rng(seed)
    sft = data(rng)
    teacher = TabularPolicy.fit(V, 2, sft, smoothing=0.2)
    student = NeuralPolicy.init(V, 2, 8, rng)
    head = RewardPosterior.init(V, 2, rng)
    return teacher, student, head, sft.prompts(), sft


def cfg(**kw):
    base = dict(steps=50, batch_size=4, lr=0.02, warmup_steps=5, seed=3,
                xkd=XKDConfig(), gen=GenConfig(max_len=3))
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_lr_schedule():
    c = cfg(steps=100, warmup_steps=10, lr=1.0)
    assert trainer.lr_at(5, c) == 0.5
    assert trainer.lr_at(10, c) == 1.0
    assert trainer.lr_at(100, c) == 0.0
    assert trainer.lr_at(55, c) == pytest.approx(0.5)
    assert trainer.lr_at(70, cfg(steps=100, warmup_steps=10, lr=1.0, lr_schedule="constant")) == 1.0


def test_optimizer_steps():
    c = cfg(optimizer="sgd", lr=0.1)
    p = np.array([1.0, -2.0])
    new, _ = trainer.optimizer_step(p, np.zeros(2), trainer.OptState(), c, 0.1)
    np.testing.assert_array_equal(new, p)
    a = cfg(optimizer="adam")
    new, st = trainer.optimizer_step(np.array([0.0]), np.array([1.0]), trainer.OptState(), a, 0.01)
    assert new[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
    assert st.t == 1
    with pytest.raises(ValueError):
        trainer.optimizer_step(p, np.zeros(3), trainer.OptState(), c, 0.1)


def test_config_bounds():
    for kw in ({"batch_size": 0}, {"lr": -1.0}, {"lr_schedule": "cosine"}, {"optimizer": "rmsprop"},
               {"warmup_steps": -1}):
        with pytest.raises(ValueError):
            cfg(**kw)


def test_sft_lr_zero_unchanged():
    _, student, _, _, sft = setup()
    before = student.params.copy()
    trainer.sft(student, sft, cfg(lr=0.0))
    np.testing.assert_array_equal(student.params, before)


def test_sft_memorizes_single_example():
    rng = np.random.default_rng(0)
    student = NeuralPolicy.init(V, 2, 8, rng)
    x, y = (1, 2), (B, 1, 2, E)
    ds = Dataset(PROMPT_RESPONSE, [(x, y)])
    _, rep = trainer.sft(student, ds, cfg(steps=500, lr=0.1, batch_size=1, warmup_steps=0))
    assert seq_logprob(student, x, y) > -0.05 * (len(y) - 1)
    assert rep.log[-1]["total"] < rep.log[0]["total"]
    assert rep.descended()


def test_sft_deterministic():
    reps = []
    for _ in range(2):
        _, student, _, _, sft = setup()
        reps.append(trainer.sft(student, sft, cfg())[1].log)
    assert reps[0] == reps[1]


def test_alpha_zero_matches_supervised():
    xkd = XKDConfig(alpha=0.0, beta=1.0, divergence="skew")
    runs = []
    for supervised in (False, True):
        t, s, h, prompts, sft = setup()
        _, _, rep = trainer.train_generalized_xkd(t, s, h, prompts, sft, cfg(xkd=xkd),
                                                  supervised=supervised, record_grads=True)
        runs.append(rep)
    assert all(r["branch"] == "offline" for r in runs[0].log)
    for a, b in zip(runs[0].theta_grads, runs[1].theta_grads):
        assert np.max(np.abs(a - b)) < 1e-12


@pytest.mark.parametrize("supervised", [False, True])
def test_lambda_zero_matches_baseline(supervised):
    xkd = XKDConfig(lam=0.0)
    runs = []
    for experiential in (True, False):
        t, s, h, prompts, sft = setup()
        _, _, rep = trainer.train_generalized_xkd(t, s, h, prompts, sft, cfg(xkd=xkd),
                                                  experiential=experiential, supervised=supervised,
                                                  record_grads=True)
        runs.append(rep)
    assert len(runs[0].theta_grads) == 50
    for a, b in zip(runs[0].theta_grads, runs[1].theta_grads):
        assert np.max(np.abs(a - b)) < 1e-12


def test_alpha_one_never_reads_sft():
    t, s, h, prompts, sft = setup()
    counted = Dataset(PROMPT_RESPONSE, CountingList(sft.records))
    _, _, rep = trainer.train_generalized_xkd(t, s, h, prompts, counted, cfg(xkd=XKDConfig(alpha=1.0)))
    assert counted.records.reads == 0
    assert all(r["branch"] == "on-policy" for r in rep.log)


def test_branch_frequency():
    t, s, h, prompts, sft = setup()
    n, alpha = 10_000, 0.3
    c = cfg(steps=n, batch_size=1, lr=0.0, warmup_steps=0, xkd=XKDConfig(alpha=alpha),
            gen=GenConfig(max_len=1))
    _, _, rep = trainer.train_generalized_xkd(t, s, h, prompts, sft, c, experiential=False)
    k = sum(r["branch"] == "on-policy" for r in rep.log)
    assert abs(k - n * alpha) < 4 * math.sqrt(n * alpha * (1 - alpha))


def test_report_metrics_and_checkpoints(tmp_path):
    t, s, h, prompts, sft = setup()
    _, _, rep = trainer.train_generalized_xkd(t, s, h, prompts, sft, cfg(steps=20, checkpoint_every=10),
                                              metrics_path=tmp_path / "m.jsonl",
                                              checkpoint_dir=tmp_path)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == len(rep.log) == 20
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "branch", "kd_term", "prior_kl_term", "td_term", "total", "lr"}
    assert (tmp_path / "gxkd-step10.ckpt").exists() and (tmp_path / "gxkd-step20.ckpt").exists()
    assert rep.checkpoint == tmp_path / "gxkd.ckpt"
    assert rep.seed == 3 and rep.wall_time > 0


def test_support_violation_aborts_with_sample():
    _, s, h, prompts, sft = setup()
    narrow = TabularPolicy(V, 2, {ctx: {0: 1.0} for ctx in
                                   [(a, b) for a in range(V.size) for b in range(V.size)]})
    with pytest.raises(NonFiniteLoss, match="prompt="):
        trainer.train_generalized_xkd(narrow, s, h, prompts, sft, cfg(xkd=XKDConfig(beta=0.5)))


def test_empty_datasets_rejected():
    t, s, h, prompts, sft = setup()
    with pytest.raises(ValueError):
        trainer.train_generalized_xkd(t, s, h, Dataset(PROMPT_ONLY, []), sft, cfg())
    with pytest.raises(ValueError):
        trainer.train_blackbox_xkd(Dataset(TEACHER_BEHAVIOR, []), s, h, cfg())


def behavior(rng, n_prompts=6, n_resp=4):
    recs = []
    for _ in range(n_prompts):
        x = tuple(int(t) for t in rng.integers(0, 3, 2))
        ys = [(B,) + tuple(int(t) for t in rng.integers(0, 3, 2)) + (E,) for _ in range(n_resp)]
        recs.append((x, ys))
    return Dataset(TEACHER_BEHAVIOR, recs)


def test_blackbox_lambda_zero_matches_seqkd():
    runs = []
    for experiential in (True, False):
        rng = np.random.default_rng(5)
        d = behavior(rng)
        s, h = NeuralPolicy.init(V, 2, 8, rng), RewardPosterior.init(V, 2, rng)
        _, _, rep = trainer.train_blackbox_xkd(d, s, h, cfg(xkd=XKDConfig(lam=0.0)),
                                               experiential=experiential, record_grads=True)
        runs.append(rep)
    for a, b in zip(runs[0].theta_grads, runs[1].theta_grads):
        assert np.max(np.abs(a - b)) < 1e-12


def test_blackbox_memorizes_single_response():
    rng = np.random.default_rng(0)
    x, y = (1, 0), (B, 2, 2, 1, E)
    d = Dataset(TEACHER_BEHAVIOR, [(x, [y])])
    s, h = NeuralPolicy.init(V, 2, 8, rng), RewardPosterior.init(V, 2, rng)
    trainer.train_blackbox_xkd(d, s, h, cfg(steps=500, lr=0.1, batch_size=1, warmup_steps=0))
    assert seq_logprob(s, x, y) > -0.05 * (len(y) - 1)


def test_pick_response_uniform():
    rng = np.random.default_rng(9)
    ys = [(B, i // 3, i % 3, E) for i in range(9)] + [(B, E)]
    rec = ((0,), ys)
    n = 100_000
    counts = np.zeros(10)
    for _ in range(n):
        counts[ys.index(trainer.pick_response(rec, rng))] += 1
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n * 0.1) < 4 * sigma)
