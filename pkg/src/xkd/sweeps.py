"""Toy tasks, evaluation metrics and the sweep harnesses.

Sweeps are pure functions of ``(config, seed)``.  A run seed is derived from
``(base_seed, replicate)`` and shared across the points of a sweep, so points
differ only in the swept value; in particular the lambda = 0 point of a
lambda sweep reproduces the non-experiential baseline bit-for-bit.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import trainer
from .oracle import EnumSpace, Memo, exact_seq_kl
from .policy import GenConfig, NeuralPolicy, TabularPolicy, greedy, sample
from .reward import RewardPosterior
from .seq import PROMPT_ONLY, PROMPT_RESPONSE, TEACHER_BEHAVIOR, Dataset, Vocab

TASK_KINDS = ("copy", "reverse", "modsum")
TEMPERATURES = (0.1, 0.3, 0.5, 1.0)
FRACTIONS = (0.25, 0.5, 0.75, 1.0)
LAMBDAS = (0.0, 0.005, 0.01, 0.015, 0.02)
TAU_PRIMES = (0.1, 0.3, 0.5, 1.0)

METHODS = {
    # name: (loop, experiential)
    "gxkd": ("generalized", True),
    "gkd": ("generalized", False),
    "sxkd": ("supervised", True),
    "skd": ("supervised", False),
    "seqxkd": ("blackbox", True),
    "seqkd": ("blackbox", False),
}
BASELINE_OF = {"gxkd": "gkd", "sxkd": "skd", "seqxkd": "seqkd"}


# --- toy tasks -------------------------------------------------------------

@dataclass(frozen=True)
class ToyTask:
    kind: str = "copy"
    n_content: int = 6
    prompt_len: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}")
        if self.n_content < 1 or self.prompt_len < 1:
            raise ValueError("n_content and prompt_len must be positive")

    @property
    def vocab(self) -> Vocab:
        return Vocab.with_content(self.n_content)

    @property
    def max_len(self) -> int:
        """Generated tokens needed for a gold response, EOS included."""
        return 2 if self.kind == "modsum" else self.prompt_len + 1

    def respond(self, x) -> tuple:
        v = self.vocab
        if self.kind == "copy":
            body = tuple(x)
        elif self.kind == "reverse":
            body = tuple(reversed(x))
        else:
            body = (sum(x) % self.n_content,)
        return (v.bos_id,) + body + (v.eos_id,)


def gen_task_data(task: ToyTask, n: int, seed: Optional[int] = None):
    """``n`` random prompts with gold responses: ``(D_prompt, D_SFT)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(task.seed if seed is None else seed)
    recs = []
    for _ in range(n):
        x = tuple(int(t) for t in rng.integers(0, task.n_content, task.prompt_len))
        recs.append((x, task.respond(x)))
    sft = Dataset(PROMPT_RESPONSE, recs)
    return sft.prompts(), sft


def teacher_behavior(teacher, prompts: Dataset, n_responses: int, gen: GenConfig, seed: int):
    """Sample ``n_responses`` teacher responses for each prompt."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(len(prompts)):
        x = prompts.prompt(i)
        recs.append((x, [sample(teacher, x, gen, rng) for _ in range(n_responses)]))
    return Dataset(TEACHER_BEHAVIOR, recs)


# --- metrics ---------------------------------------------------------------

def _check_eval(eval_set):
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")


def _token_hits(pred, gold):
    g = gold[1:]
    p = pred[1:]
    return sum(1 for i, t in enumerate(g) if i < len(p) and p[i] == t), len(g)


def token_accuracy(student, eval_set: Dataset, max_len: int) -> float:
    """Greedy decode; fraction of gold positions (EOS included) reproduced."""
    _check_eval(eval_set)
    hits = total = 0
    for x, y in eval_set.records:
        h, n = _token_hits(greedy(student, x, max_len), y)
        hits += h
        total += n
    return hits / total


def exact_match(student, eval_set: Dataset, gen: GenConfig) -> float:
    """Greedy decode compared to the gold response token for token.

    Greedy decoding ignores the sampling temperature in ``gen``.
    """
    _check_eval(eval_set)
    ok = sum(greedy(student, x, gen.max_len) == tuple(y) for x, y in eval_set.records)
    return ok / len(eval_set)


def performance(task: ToyTask, student, eval_set: Dataset) -> float:
    if task.kind == "modsum":
        return exact_match(student, eval_set, GenConfig(max_len=task.max_len))
    return token_accuracy(student, eval_set, task.max_len)


def sampled_performance(task: ToyTask, pairs) -> float:
    """Performance of sampled ``(pred, gold)`` pairs, same metric per task."""
    if task.kind == "modsum":
        return sum(p == g for p, g in pairs) / len(pairs)
    hits = total = 0
    for p, g in pairs:
        h, n = _token_hits(p, g)
        hits += h
        total += n
    return hits / total


def mean_seq_kl(teacher, student, prompts, vocab: Vocab, max_len: int) -> float:
    """Exact sequence KL(teacher || student) averaged over ``prompts``."""
    mt, ms = Memo(teacher), Memo(student)
    return float(np.mean([exact_seq_kl(mt, ms, EnumSpace(vocab, max_len, x)) for x in prompts]))


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _strip(seq, bos_id):
    seq = tuple(seq)
    return seq[1:] if bos_id is not None and seq and seq[0] == bos_id else seq


def _bleu(hyp_counts, hyp_len, max_ref, ref_len):
    if hyp_len == 0:
        return 0.0
    logs = []
    for n, counts in enumerate(hyp_counts, start=1):
        total = sum(counts.values())
        if total == 0:
            continue  # sequence shorter than n: order skipped
        clipped = sum(min(c, max_ref(n, g)) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        logs.append(math.log(clipped / total))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def _closest(lengths, c):
    return min(lengths, key=lambda r: (abs(r - c), r))


def self_bleu(samples: Sequence, max_n: int = 2, bos_id: Optional[int] = None) -> float:
    """Mean BLEU (orders 1..max_n, uniform weights) of each sample against
    all the others.  A leading ``bos_id`` is stripped before counting."""
    if len(samples) < 2:
        raise ValueError("self_bleu needs at least two samples")
    seqs = [_strip(s, bos_id) for s in samples]
    counts = [[_ngrams(s, n) for n in range(1, max_n + 1)] for s in seqs]
    # per n-gram: the two largest counts with their owners, so the max over
    # "all samples but i" is one lookup
    top = [dict() for _ in range(max_n)]
    for i, per_n in enumerate(counts):
        for n, cnt in enumerate(per_n):
            for g, c in cnt.items():
                best = top[n].get(g, [])
                best.append((c, i))
                best.sort(reverse=True)
                top[n][g] = best[:2]
    len_count = Counter(len(s) for s in seqs)
    scores = []
    for i, s in enumerate(seqs):
        def max_ref(n, g, i=i):
            for c, owner in top[n - 1].get(g, []):
                if owner != i:
                    return c
            return 0
        lens = [r for r, c in len_count.items() if c - (r == len(s)) > 0]
        scores.append(_bleu(counts[i], len(s), max_ref, _closest(lens, len(s))))
    return float(np.mean(scores))


def self_bleu_naive(samples: Sequence, max_n: int = 2, bos_id: Optional[int] = None) -> float:
    """Direct O(n^2) reference implementation of :func:`self_bleu`."""
    if len(samples) < 2:
        raise ValueError("self_bleu needs at least two samples")
    seqs = [_strip(s, bos_id) for s in samples]
    scores = []
    for i, s in enumerate(seqs):
        refs = seqs[:i] + seqs[i + 1:]

        def max_ref(n, g):
            return max(_ngrams(r, n)[g] for r in refs)
        hyp = [_ngrams(s, n) for n in range(1, max_n + 1)]
        scores.append(_bleu(hyp, len(s), max_ref, _closest([len(r) for r in refs], len(s))))
    return float(np.mean(scores))


# --- records ---------------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    metric: str
    value: float
    method: str = ""
    seed: int = 0
    temperature: Optional[float] = None
    data_fraction: Optional[float] = None
    lam: Optional[float] = None
    tau_prime: Optional[float] = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite value for metric {self.metric}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        return cls(**json.loads(line))


def write_records(path, records) -> Path:
    path = Path(path)
    path.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    return path


def read_records(path) -> list[MetricRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [MetricRecord.from_json(ln) for ln in lines if ln.strip()]


def write_curve(path, xs, ys) -> Path:
    path = Path(path)
    path.write_text("".join(f"{x!r} {y!r}\n" for x, y in zip(xs, ys)), encoding="utf-8")
    return path


def read_curve(path):
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [float(r[0]) for r in rows], [float(r[1]) for r in rows]


def curve(records, x_field: str, metric: str, method: Optional[str] = None):
    """Mean ``metric`` per distinct ``x_field`` value, sorted by x."""
    groups = {}
    for r in records:
        if r.metric != metric or (method is not None and r.method != method):
            continue
        x = getattr(r, x_field)
        if x is not None:
            groups.setdefault(x, []).append(r.value)
    xs = sorted(groups)
    return xs, [float(np.mean(groups[x])) for x in xs]


# --- experiment setup and runs ----------------------------------------------

@dataclass
class ExperimentSetup:
    task: ToyTask
    teacher: TabularPolicy
    prompts: Dataset
    sft_data: Dataset
    eval_set: Dataset
    train: trainer.TrainConfig
    student_k: int = 2
    hidden: int = 32
    n_responses: int = 10
    kl_eval: int = 50
    teacher_data: Optional[Dataset] = field(default=None, repr=False)

    @classmethod
    def build(cls, task: ToyTask, train: trainer.TrainConfig, n_train: int = 500,
              n_eval: int = 200, teacher_k: int = 2, smoothing: float = 0.1, **kw):
        prompts, sft_data = gen_task_data(task, n_train, seed=task.seed)
        _, eval_set = gen_task_data(task, n_eval, seed=task.seed + 1)
        teacher = TabularPolicy.fit(task.vocab, teacher_k, sft_data, smoothing=smoothing)
        return cls(task, teacher, prompts, sft_data, eval_set, train, **kw)

    def behavior(self) -> Dataset:
        if self.teacher_data is None:
            gen = replace(self.train.gen, max_len=self.task.max_len)
            self.teacher_data = teacher_behavior(self.teacher, self.prompts, self.n_responses,
                                                 gen, self.task.seed + 2)
        return self.teacher_data

    def fraction(self, f: float) -> "ExperimentSetup":
        """Setup restricted to the first ``floor(f * n)`` training records."""
        n = max(1, math.floor(f * len(self.sft_data)))
        sft = Dataset(PROMPT_RESPONSE, self.sft_data.records[:n])
        out = replace(self, prompts=Dataset(PROMPT_ONLY, self.prompts.records[:n]), sft_data=sft,
                      teacher_data=None)
        if self.teacher_data is not None:
            out.teacher_data = Dataset(TEACHER_BEHAVIOR, self.teacher_data.records[:n])
        return out


def run_seed(base_seed: int, replicate: int) -> int:
    """Run seed shared by every point of a sweep for one replicate."""
    return int(np.random.SeedSequence([base_seed, replicate]).generate_state(1)[0])


def init_student(setup: ExperimentSetup, seed: int):
    rng = np.random.default_rng(seed)
    v = setup.task.vocab
    student = NeuralPolicy.init(v, setup.student_k, setup.hidden, rng)
    head = RewardPosterior.init(v, setup.student_k, rng)
    return student, head


def run_method(method: str, setup: ExperimentSetup, cfg: trainer.TrainConfig, seed: int, **kw):
    """Train a fresh student with ``method``; returns ``(student, head, report)``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    loop, experiential = METHODS[method]
    cfg = replace(cfg, seed=seed, gen=replace(cfg.gen, max_len=setup.task.max_len))
    student, head = init_student(setup, seed)
    if loop == "blackbox":
        return trainer.train_blackbox_xkd(setup.behavior(), student, head, cfg,
                                          experiential=experiential, **kw)
    return trainer.train_generalized_xkd(setup.teacher, student, head, setup.prompts,
                                         setup.sft_data, cfg, experiential=experiential,
                                         supervised=loop == "supervised", **kw)


def evaluate(setup: ExperimentSetup, student, **labels) -> list[MetricRecord]:
    task = setup.task
    prompts = [x for x, _ in setup.eval_set.records[: setup.kl_eval]]
    kl = mean_seq_kl(setup.teacher, student, prompts, task.vocab, task.max_len)
    return [MetricRecord("performance", performance(task, student, setup.eval_set), **labels),
            MetricRecord("seq_kl", kl, **labels)]


# --- sweeps ----------------------------------------------------------------

def sweep_temperature(task: ToyTask, student, eval_set: Dataset, temps=TEMPERATURES,
                      n_samples: int = 500, seed: int = 0, top_p: float = 0.95,
                      method: str = "", n_prompts: int = 10) -> list[MetricRecord]:
    """Performance and diversity (1 - SelfBLEU) of sampled responses per temperature.

    ``n_samples`` responses are drawn round-robin over the first ``n_prompts``
    eval prompts; SelfBLEU is computed among responses to the same prompt and
    averaged over prompts.
    """
    _check_eval(eval_set)
    recs = eval_set.records[:n_prompts]
    if n_samples < 2 * len(recs):
        raise ValueError(f"n_samples={n_samples} gives fewer than 2 samples for some of "
                         f"{len(recs)} prompts")
    bos = task.vocab.bos_id
    out = []
    for j, T in enumerate(temps):
        rng = np.random.default_rng([seed, j])
        gen = GenConfig(temperature=T, top_p=top_p, max_len=task.max_len, seed=seed)
        groups = {}
        pairs = []
        for i in range(n_samples):
            x, y = recs[i % len(recs)]
            pred = sample(student, x, gen, rng)
            groups.setdefault(i % len(recs), []).append(pred)
            pairs.append((pred, y))
        bleus = [self_bleu(g, 2, bos) for g in groups.values()]
        labels = dict(method=method, seed=seed, temperature=T)
        out.append(MetricRecord("performance", sampled_performance(task, pairs), **labels))
        out.append(MetricRecord("diversity", 1.0 - float(np.mean(bleus)), **labels))
    return out


def fraction_config(cfg: trainer.TrainConfig, f: float) -> trainer.TrainConfig:
    """Steps (and warm-up) scaled by ``f``, rounded down."""
    return replace(cfg, steps=math.floor(f * cfg.steps),
                   warmup_steps=math.floor(f * cfg.warmup_steps))


def sweep_data_fraction(methods, setup: ExperimentSetup, fractions=FRACTIONS,
                        n_seeds: int = 1, base_seed: int = 0) -> list[MetricRecord]:
    out = []
    for method in methods:
        for f in fractions:
            sub = setup.fraction(f)
            cfg = fraction_config(setup.train, f)
            for r in range(n_seeds):
                s = run_seed(base_seed, r)
                student, _, _ = run_method(method, sub, cfg, s)
                out += evaluate(setup, student, method=method, seed=s, data_fraction=f)
    return out


def _value_sweep(setup, method, field_name, values, n_seeds, base_seed, baseline):
    out = []
    for r in range(n_seeds):
        s = run_seed(base_seed, r)
        for v in values:
            xkd = replace(setup.train.xkd, **{field_name: v})
            student, _, _ = run_method(method, setup, replace(setup.train, xkd=xkd), s)
            label = {"lam" if field_name == "lam" else "tau_prime": v}
            out += evaluate(setup, student, method=method, seed=s, **label)
        if baseline:
            student, _, _ = run_method(BASELINE_OF[method], setup, setup.train, s)
            out += evaluate(setup, student, method=BASELINE_OF[method], seed=s)
    return out


def sweep_lambda(setup: ExperimentSetup, values=LAMBDAS, method: str = "gxkd",
                 n_seeds: int = 1, base_seed: int = 0, baseline: bool = True):
    """One run per lambda per seed, plus the non-experiential baseline."""
    return _value_sweep(setup, method, "lam", values, n_seeds, base_seed, baseline)


def sweep_tau_prime(setup: ExperimentSetup, values=TAU_PRIMES, method: str = "gxkd",
                    n_seeds: int = 1, base_seed: int = 0):
    return _value_sweep(setup, method, "tau_prime", values, n_seeds, base_seed, False)
