"""Command-line entry point.

    xkd <command> [--config PATH] [--set key=value]... --out DIR

Commands: sft, distill, distill-blackbox, eval, sweep, verify.  Summaries go
to stdout as tab-separated ``name<TAB>value`` rows; files go under ``--out``.
Exit status is 0 iff every contract checked by the command held, 1 on a
failed contract and 2 on a usage, input or numeric error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import plotting, suite, sweeps, trainer
from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, parse_config
from .objectives import NonFiniteLoss
from .oracle import BudgetExceeded
from .seq import PROMPT_ONLY, PROMPT_RESPONSE, TEACHER_BEHAVIOR, DatasetFormatError, load_dataset

COMMANDS = ("sft", "distill", "distill-blackbox", "eval", "sweep", "verify")
log = logging.getLogger("xkd")


def _row(name, value):
    print(f"{name}\t{value}")


def build_setup(cfg: Config) -> sweeps.ExperimentSetup:
    task = cfg.task()
    vocab = task.vocab
    train = cfg.train(task.max_len)
    if cfg["data.sft"]:
        sft = load_dataset(cfg["data.sft"], PROMPT_RESPONSE, vocab)
    else:
        _, sft = sweeps.gen_task_data(task, cfg["task.n_train"], seed=task.seed)
    prompts = load_dataset(cfg["data.prompts"], PROMPT_ONLY, vocab) if cfg["data.prompts"] \
        else sft.prompts()
    _, eval_set = sweeps.gen_task_data(task, cfg["task.n_eval"], seed=task.seed + 1)
    if cfg["teacher.checkpoint"]:
        teacher, _ = load_checkpoint(cfg["teacher.checkpoint"])
    else:
        from .policy import TabularPolicy
        teacher = TabularPolicy.fit(vocab, cfg["teacher.k"], sft, smoothing=cfg["teacher.smoothing"])
    setup = sweeps.ExperimentSetup(task, teacher, prompts, sft, eval_set, train,
                                   student_k=cfg["student.k"], hidden=cfg["student.hidden"],
                                   n_responses=cfg["blackbox.n_responses"],
                                   kl_eval=cfg["eval.kl_prompts"])
    if cfg["data.teacher"]:
        setup.teacher_data = load_dataset(cfg["data.teacher"], TEACHER_BEHAVIOR, vocab)
    return setup


def _student(cfg, setup):
    if cfg["student.checkpoint"]:
        student, head = load_checkpoint(cfg["student.checkpoint"])
        if head is None:
            _, head = sweeps.init_student(setup, cfg["run.seed"])
        return student, head
    return sweeps.init_student(setup, cfg["run.seed"])


def _report_metrics(prefix, records):
    for r in records:
        _row(f"{prefix}.{r.metric}", repr(r.value))


def cmd_sft(cfg, out: Path) -> int:
    setup = build_setup(cfg)
    student, _ = _student(cfg, setup)
    _, rep = trainer.sft(student, setup.sft_data, setup.train, metrics_path=out / "metrics.jsonl",
                         checkpoint_dir=out)
    plotting.plot_training(rep.log, out / "loss.png", "SFT loss")
    _report_metrics("final", sweeps.evaluate(setup, student))
    _row("checkpoint", rep.checkpoint)
    if not rep.log:
        return 0
    first, last = rep.window_means()
    _row("loss.first_window", repr(first))
    _row("loss.last_window", repr(last))
    return 0 if last < first else 1


def _distill(cfg, out, blackbox: bool) -> int:
    setup = build_setup(cfg)
    student, head = _student(cfg, setup)
    _report_metrics("initial", sweeps.evaluate(setup, student))
    train = setup.train
    kw = dict(metrics_path=out / "metrics.jsonl", checkpoint_dir=out)
    if blackbox:
        method = cfg["blackbox.method"]
        _, _, rep = trainer.train_blackbox_xkd(setup.behavior(), student, head, train,
                                               experiential=method == "seqxkd", **kw)
    else:
        method = cfg["distill.method"]
        loop, experiential = sweeps.METHODS[method]
        _, _, rep = trainer.train_generalized_xkd(
            setup.teacher, student, head, setup.prompts, setup.sft_data, train,
            experiential=experiential, supervised=loop == "supervised", **kw)
    plotting.plot_training(rep.log, out / "loss.png", f"{method} loss")
    _row("method", method)
    _report_metrics("final", sweeps.evaluate(setup, student))
    _row("checkpoint", rep.checkpoint)
    _row("wall_time", f"{rep.wall_time:.3f}")
    return 0


def cmd_eval(cfg, out: Path) -> int:
    path = cfg.require("student.checkpoint")
    setup = build_setup(cfg)
    student, _ = load_checkpoint(path)
    recs = sweeps.evaluate(setup, student)
    recs += sweeps.sweep_temperature(setup.task, student, setup.eval_set,
                                     n_samples=cfg["sweep.n_samples"], seed=cfg["run.seed"],
                                     top_p=cfg["gen.top_p"], n_prompts=cfg["sweep.n_prompts"])
    sweeps.write_records(out / "eval.jsonl", recs)
    _write_temperature_curves(recs, out, [""])
    for r in recs:
        suffix = "" if r.temperature is None else f"@T={r.temperature}"
        _row(f"{r.metric}{suffix}", repr(r.value))
    return 0


def _write_temperature_curves(recs, out, methods):
    perf, div = {}, {}
    for m in methods:
        perf[m] = sweeps.curve(recs, "temperature", "performance", m)
        div[m] = sweeps.curve(recs, "temperature", "diversity", m)
        tag = f"_{m}" if m else ""
        sweeps.write_curve(out / f"performance_vs_temperature{tag}.txt", *perf[m])
        sweeps.write_curve(out / f"diversity_vs_temperature{tag}.txt", *div[m])
    plotting.plot_tradeoff(perf, div, out / "tradeoff.png")


def cmd_sweep(cfg, out: Path) -> int:
    setup = build_setup(cfg)
    kind, seed, n_seeds = cfg["sweep.kind"], cfg["run.seed"], cfg["sweep.n_seeds"]
    values = cfg["sweep.values"]
    if kind == "temperature":
        methods = [m.strip() for m in cfg["sweep.methods"].split(",") if m.strip()]
        recs = []
        for m in methods:
            for r in range(n_seeds):
                s = sweeps.run_seed(seed, r)
                student, _, _ = sweeps.run_method(m, setup, setup.train, s)
                recs += sweeps.sweep_temperature(setup.task, student, setup.eval_set,
                                                 values or sweeps.TEMPERATURES,
                                                 cfg["sweep.n_samples"], s, cfg["gen.top_p"], m,
                                                 cfg["sweep.n_prompts"])
        _write_temperature_curves(recs, out, methods)
        x_field = "temperature"
    elif kind == "data_fraction":
        methods = [m.strip() for m in cfg["sweep.methods"].split(",") if m.strip()]
        recs = sweeps.sweep_data_fraction(methods, setup, values or sweeps.FRACTIONS,
                                          n_seeds, seed)
        x_field = "data_fraction"
    elif kind == "lambda":
        recs = sweeps.sweep_lambda(setup, values or sweeps.LAMBDAS, cfg["sweep.method"],
                                   n_seeds, seed)
        x_field = "lam"
    else:
        recs = sweeps.sweep_tau_prime(setup, values or sweeps.TAU_PRIMES, cfg["sweep.method"],
                                      n_seeds, seed)
        x_field = "tau_prime"
    sweeps.write_records(out / "sweep.jsonl", recs)
    methods = sorted({r.method for r in recs})
    for metric in sorted({r.metric for r in recs}):
        curves = {}
        for m in methods:
            xs, ys = sweeps.curve(recs, x_field, metric, m)
            if xs:
                curves[m] = (xs, ys)
                sweeps.write_curve(out / f"{metric}_vs_{x_field}_{m}.txt", xs, ys)
        if curves:
            plotting.plot_curves(curves, out / f"{metric}_vs_{x_field}.png", x_field, metric)
    for r in recs:
        x = getattr(r, x_field)
        _row(f"{r.method}\t{x_field}={x}\tseed={r.seed}\t{r.metric}", repr(r.value))
    return 0


def cmd_verify(cfg, out: Path) -> int:
    results = suite.run_all(cfg["run.seed"])
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        _row(f"{status}\t{r.name}", f"{r.residual:.3e}")
        lines.append(f"{status}\t{r.name}\t{r.residual!r}\t{r.tol!r}\n")
    (out / "verify.tsv").write_text("".join(lines), encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {
    "sft": cmd_sft,
    "distill": lambda c, o: _distill(c, o, blackbox=False),
    "distill-blackbox": lambda c, o: _distill(c, o, blackbox=True),
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xkd", description="experiential knowledge distillation")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file (default: built-in defaults)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.echo(), encoding="utf-8")
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, FileNotFoundError, DatasetFormatError, CheckpointError,
            NonFiniteLoss, BudgetExceeded, ValueError) as e:
        print(f"xkd {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
