"""PNG figures for training logs and sweep curves (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training(log, path, title: str = "training loss") -> Path:
    """Total loss and its components per step from a trainer log."""
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "kd_term", "prior_kl_term"):
        ax.plot(steps, [r[key] for r in log], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_curves(curves: dict, path, xlabel: str, ylabel: str, title: str = "") -> Path:
    """``curves`` maps a label to ``(xs, ys)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    return _save(fig, path)


def plot_tradeoff(perf: dict, div: dict, path, title: str = "performance vs diversity") -> Path:
    """Diversity on x, performance on y, one line per method; both dicts map
    method to ``(temps, values)`` with matching temperature order."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in perf:
        temps, p = perf[method]
        _, d = div[method]
        ax.plot(d, p, marker="o", label=method or "student")
        for T, xd, yp in zip(temps, d, p):
            ax.annotate(f"T={T}", (xd, yp), fontsize=7)
    ax.set_xlabel("diversity (1 - SelfBLEU)")
    ax.set_ylabel("performance")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)
