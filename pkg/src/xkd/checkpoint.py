"""Plain-text checkpoints for policies and the reward head.

Neural::

    neural k=<k> hidden=<h> vocab=<V>
    <one parameter per line>
    rewardhead F=<F>            (optional section)
    <one parameter per line>

Tabular::

    tabular k=<k> vocab=<V>
    <ctx tokens> : <id> <weight> <id> <weight> ...

Floats are written with ``repr`` so a save/load round trip is exact.  Files
assume the standard vocab layout (BOS = V-2, EOS = V-1).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .policy import NeuralPolicy, TabularPolicy
from .reward import RewardPosterior
from .seq import Vocab


class CheckpointError(ValueError):
    pass


def _header_fields(line, kind):
    parts = line.split()
    if not parts or parts[0] != kind:
        raise CheckpointError(f"expected a '{kind}' header, got {line!r}")
    out = {}
    for p in parts[1:]:
        key, _, val = p.partition("=")
        out[key] = int(val)
    return out


def save_checkpoint(path, policy, head: RewardPosterior = None) -> Path:
    path = Path(path)
    lines = []
    if isinstance(policy, NeuralPolicy):
        lines.append(f"neural k={policy.context_window} hidden={policy.hidden_size} "
                     f"vocab={policy.vocab.size}")
        lines.extend(repr(float(v)) for v in policy.params)
    elif isinstance(policy, TabularPolicy):
        lines.append(f"tabular k={policy.context_window} vocab={policy.vocab.size}")
        for ctx in sorted(policy.table):
            row = policy.table[ctx]
            body = " ".join(f"{t} {row[t]!r}" for t in sorted(row))
            lines.append(f"{' '.join(map(str, ctx))} : {body}".lstrip())
    else:
        raise TypeError(f"cannot checkpoint {type(policy).__name__}")
    if head is not None:
        lines.append(f"rewardhead F={head.n_features}")
        lines.extend(repr(float(v)) for v in head.params)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    """Return ``(policy, head_or_None)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise CheckpointError(f"empty checkpoint {path}")
    head_at = next((i for i, ln in enumerate(lines) if ln.startswith("rewardhead")), len(lines))
    body, tail = lines[:head_at], lines[head_at:]
    kind = body[0].split()[0]
    if kind == "neural":
        h = _header_fields(body[0], "neural")
        vocab = Vocab.standard(h["vocab"])
        params = np.array([float(v) for v in body[1:]])
        policy = NeuralPolicy(vocab, h["k"], h["hidden"], params)
    elif kind == "tabular":
        h = _header_fields(body[0], "tabular")
        vocab = Vocab.standard(h["vocab"])
        table = {}
        for ln in body[1:]:
            ctx_s, _, row_s = ln.partition(":")
            vals = row_s.split()
            if len(vals) % 2:
                raise CheckpointError(f"odd id/weight list in {ln!r}")
            ctx = tuple(int(t) for t in ctx_s.split())
            table[ctx] = {int(vals[i]): float(vals[i + 1]) for i in range(0, len(vals), 2)}
        policy = TabularPolicy(vocab, h["k"], table)
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    head = None
    if tail:
        F = _header_fields(tail[0], "rewardhead")["F"]
        if F % vocab.size:
            raise CheckpointError(f"F={F} is not a multiple of vocab size {vocab.size}")
        head = RewardPosterior(vocab, F // vocab.size - 1, np.array([float(v) for v in tail[1:]]))
    return policy, head
