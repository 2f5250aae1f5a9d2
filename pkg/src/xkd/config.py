"""Plain ``key = value`` run configuration with dotted namespaces.

Unknown keys, unparsable values and out-of-range values are rejected with
the key name and its source line.  ``echo`` writes every effective value in
the same syntax, so ``parse_config`` on an echo reproduces the config.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .divergence import MODES
from .objectives import XKDConfig
from .policy import GenConfig
from .reward import RewardPrior
from .sweeps import METHODS, TASK_KINDS, ToyTask
from .trainer import LR_SCHEDULES, OPTIMIZERS, TrainConfig

SEED_ENV = "XKD_SEED"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    s = s.strip()
    return tuple(float(v) for v in s.split(",")) if s else ()


def _str(s: str) -> str:
    return s.strip()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _in(*choices):
    return lambda v: v in choices, f"one of {', '.join(map(str, choices))}"


_UNIT = (lambda v: 0.0 <= v <= 1.0, "in [0, 1]")
_POS = (lambda v: v > 0, "> 0")
_NONNEG = (lambda v: v >= 0, ">= 0")
_ANY = (lambda v: True, "")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: tuple = _ANY


def _key(parse, default, check=_ANY):
    return Key(parse, default, check)


_x, _g, _t = XKDConfig(), GenConfig(), TrainConfig()

SCHEMA: dict[str, Key] = {
    "run.seed": _key(int, 0),
    "task.kind": _key(_str, "copy", _in(*TASK_KINDS)),
    "task.n_content": _key(int, 6, _POS),
    "task.prompt_len": _key(int, 3, _POS),
    "task.n_train": _key(int, 500, _POS),
    "task.n_eval": _key(int, 200, _POS),
    "data.sft": _key(_str, ""),
    "data.prompts": _key(_str, ""),
    "data.teacher": _key(_str, ""),
    "teacher.k": _key(int, 4, _POS),
    "teacher.smoothing": _key(float, 0.1, _NONNEG),
    "teacher.checkpoint": _key(_str, ""),
    "student.k": _key(int, 4, _POS),
    "student.hidden": _key(int, 32, _POS),
    "student.checkpoint": _key(_str, ""),
    "train.steps": _key(int, 2000, _NONNEG),
    "train.batch_size": _key(int, 8, _POS),
    "train.lr": _key(float, 0.01, _POS),
    "train.lr_schedule": _key(_str, _t.lr_schedule, _in(*LR_SCHEDULES)),
    "train.warmup_steps": _key(int, 200, _NONNEG),
    "train.optimizer": _key(_str, _t.optimizer, _in(*OPTIMIZERS)),
    "train.adam_beta1": _key(float, _t.adam_beta1, (lambda v: 0 <= v < 1, "in [0, 1)")),
    "train.adam_beta2": _key(float, _t.adam_beta2, (lambda v: 0 <= v < 1, "in [0, 1)")),
    "train.adam_eps": _key(float, _t.adam_eps, _POS),
    "train.max_grad_norm": _key(float, 0.0, _NONNEG),
    "train.checkpoint_every": _key(int, 0, _NONNEG),
    "xkd.lambda": _key(float, _x.lam, _NONNEG),
    "xkd.gamma": _key(float, _x.gamma, _UNIT),
    "xkd.alpha": _key(float, _x.alpha, _UNIT),
    "xkd.beta": _key(float, _x.beta, _UNIT),
    "xkd.tau": _key(float, _x.tau, _POS),
    "xkd.tau_prime": _key(float, _x.tau_prime, _POS),
    "xkd.divergence": _key(_str, _x.divergence, _in(*MODES)),
    "xkd.boltzmann": _key(_bool, _x.boltzmann),
    "xkd.prior_mean": _key(float, 0.0),
    "xkd.prior_std": _key(float, 1.0, _POS),
    "gen.temperature": _key(float, _g.temperature, _POS),
    "gen.top_p": _key(float, _g.top_p, (lambda v: 0 < v <= 1, "in (0, 1]")),
    "distill.method": _key(_str, "gxkd", _in("gxkd", "gkd", "sxkd", "skd")),
    "blackbox.method": _key(_str, "seqxkd", _in("seqxkd", "seqkd")),
    "blackbox.n_responses": _key(int, 10, _POS),
    "sweep.kind": _key(_str, "temperature", _in("temperature", "data_fraction", "lambda",
                                                "tau_prime")),
    "sweep.method": _key(_str, "gxkd", _in(*METHODS)),
    "sweep.methods": _key(_str, "gkd,gxkd"),
    "sweep.values": _key(_floats, ()),
    "sweep.n_seeds": _key(int, 1, _POS),
    "sweep.n_samples": _key(int, 500, (lambda v: v >= 2, ">= 2")),
    "sweep.n_prompts": _key(int, 10, _POS),
    "eval.kl_prompts": _key(int, 50, _POS),
}


class Config:
    """Typed, validated view of the effective configuration."""

    def __init__(self, values: dict):
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values

    def __repr__(self):
        return f"Config({self.values!r})"

    def require(self, key: str):
        v = self.values[key]
        if v in ("", ()):
            raise ConfigError(f"missing required key '{key}'")
        return v

    def echo(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    # builders
    def xkd(self) -> XKDConfig:
        v = self.values
        return XKDConfig(lam=v["xkd.lambda"], gamma=v["xkd.gamma"], alpha=v["xkd.alpha"],
                         beta=v["xkd.beta"], tau=v["xkd.tau"], tau_prime=v["xkd.tau_prime"],
                         divergence=v["xkd.divergence"], boltzmann=v["xkd.boltzmann"],
                         prior=RewardPrior(v["xkd.prior_mean"], v["xkd.prior_std"]))

    def gen(self, max_len: int) -> GenConfig:
        return GenConfig(temperature=self["gen.temperature"], top_p=self["gen.top_p"],
                         max_len=max_len, seed=self["run.seed"])

    def train(self, max_len: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["train.steps"], batch_size=v["train.batch_size"], lr=v["train.lr"],
            lr_schedule=v["train.lr_schedule"], warmup_steps=v["train.warmup_steps"],
            seed=v["run.seed"], xkd=self.xkd(), gen=self.gen(max_len),
            optimizer=v["train.optimizer"], adam_beta1=v["train.adam_beta1"],
            adam_beta2=v["train.adam_beta2"], adam_eps=v["train.adam_eps"],
            max_grad_norm=v["train.max_grad_norm"], checkpoint_every=v["train.checkpoint_every"])

    def task(self) -> ToyTask:
        return ToyTask(self["task.kind"], self["task.n_content"], self["task.prompt_len"],
                       self["run.seed"])


def _set(values, key, raw, where):
    entry = SCHEMA.get(key)
    if entry is None:
        raise ConfigError(f"{where}: unknown key '{key}'")
    try:
        val = entry.parse(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for '{key}': {e}") from None
    ok, desc = entry.check
    if not ok(val):
        raise ConfigError(f"{where}: '{key}' = {raw.strip()} out of bounds (must be {desc})")
    values[key] = val


def _split(line, where):
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
    key, _, raw = line.partition("=")
    return key.strip(), raw


def parse_text(text: str, overrides=(), source: str = "<config>", env=None) -> Config:
    values = {k: s.default for k, s in SCHEMA.items()}
    for i, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        where = f"{source} line {i}"
        key, raw = _split(body, where)
        _set(values, key, raw, where)
    for ov in overrides:
        key, raw = _split(ov, f"--set {ov}")
        _set(values, key, raw, f"--set {ov}")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        _set(values, "run.seed", env[SEED_ENV], f"${SEED_ENV}")
    return Config(values)


def parse_config(path=None, overrides=(), env=None) -> Config:
    """Defaults, then the file at ``path`` (if any), then ``--set`` overrides,
    then ``XKD_SEED``."""
    if path is None:
        return parse_text("", overrides, env=env)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), overrides, str(path), env=env)
