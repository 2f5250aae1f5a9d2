"""Vocabulary, prompts, sequences, datasets and the NLG-as-MDP step view.

Token ids ``0 .. n_content - 1`` are content tokens; the standard layout puts
BOS at ``size - 2`` and EOS at ``size - 1``.  Prompts and sequences are plain
tuples of ints; the :class:`Vocab` validates them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

PROMPT_ONLY = "prompt-only"
PROMPT_RESPONSE = "prompt-response"
TEACHER_BEHAVIOR = "teacher-behavior"
DATASET_KINDS = (PROMPT_ONLY, PROMPT_RESPONSE, TEACHER_BEHAVIOR)


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the offending line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Vocab:
    size: int
    bos_id: int
    eos_id: int
    max_len: Optional[int] = None

    def __post_init__(self):
        if self.size < 3:
            raise ValueError(f"vocab size must be >= 3, got {self.size}")
        if self.bos_id == self.eos_id:
            raise ValueError("bos_id and eos_id must differ")
        for name in ("bos_id", "eos_id"):
            v = getattr(self, name)
            if not 0 <= v < self.size:
                raise ValueError(f"{name}={v} out of range for size {self.size}")

    @classmethod
    def standard(cls, size: int, max_len: Optional[int] = None) -> "Vocab":
        return cls(size=size, bos_id=size - 2, eos_id=size - 1, max_len=max_len)

    @classmethod
    def with_content(cls, n_content: int, max_len: Optional[int] = None) -> "Vocab":
        return cls.standard(n_content + 2, max_len=max_len)

    @property
    def action_mask(self) -> np.ndarray:
        """Boolean mask of ids a policy may emit (everything but BOS)."""
        m = np.ones(self.size, dtype=bool)
        m[self.bos_id] = False
        return m

    @property
    def n_actions(self) -> int:
        return self.size - 1

    @property
    def content_ids(self) -> list[int]:
        return [i for i in range(self.size) if i not in (self.bos_id, self.eos_id)]

    def check_token(self, tok: int) -> None:
        if not (isinstance(tok, (int, np.integer)) and 0 <= tok < self.size):
            raise ValueError(f"token {tok!r} out of range for vocab size {self.size}")

    def check_prompt(self, x) -> tuple:
        x = tuple(int(t) for t in x)
        if not x:
            raise ValueError("prompt must be nonempty")
        for t in x:
            self.check_token(t)
        if self.eos_id in x:
            raise ValueError("prompt must not contain EOS")
        return x

    def check_sequence(self, y) -> tuple:
        y = tuple(int(t) for t in y)
        if not y or y[0] != self.bos_id:
            raise ValueError("sequence must start with BOS")
        for t in y:
            self.check_token(t)
        if self.eos_id in y[:-1]:
            raise ValueError("EOS may only appear as the final token")
        if self.max_len is not None and len(y) - 1 > self.max_len:
            raise ValueError(f"sequence has {len(y) - 1} generated tokens, max is {self.max_len}")
        return y


class StepQuadruple(NamedTuple):
    """One MDP transition: state ``s``, action ``a``, next state, next action."""

    s: tuple  # (prompt, prefix)
    a: int
    s_next: tuple
    a_next: Optional[int]

    @property
    def terminal(self) -> bool:
        return self.a_next is None


def expand_quadruples(x, y, vocab: Vocab) -> list[StepQuadruple]:
    """Expand ``(x, y)`` into one quadruple per generated token, in order.

    The quadruple of the last generated token has ``a_next=None``.
    """
    x = vocab.check_prompt(x)
    y = vocab.check_sequence(y)
    n = len(y) - 1
    out = []
    for t in range(n):
        a_next = y[t + 2] if t + 2 <= n else None
        out.append(StepQuadruple((x, y[: t + 1]), y[t + 1], (x, y[: t + 2]), a_next))
    return out


def n_steps(y) -> int:
    """Number of generated (non-BOS) tokens in ``y``."""
    return len(y) - 1


@dataclass
class Dataset:
    kind: str
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        for r in self.records:
            self._check_arity(r)

    def _check_arity(self, r):
        if self.kind == PROMPT_ONLY:
            ok = isinstance(r, tuple) and all(isinstance(t, (int, np.integer)) for t in r)
        elif self.kind == PROMPT_RESPONSE:
            ok = isinstance(r, tuple) and len(r) == 2 and isinstance(r[1], tuple)
        else:
            ok = isinstance(r, tuple) and len(r) == 2 and isinstance(r[1], list) and len(r[1]) > 0
        if not ok:
            raise ValueError(f"record {r!r} does not match dataset kind {self.kind}")

    def __len__(self):
        return len(self.records)

    def prompt(self, i) -> tuple:
        r = self.records[i]
        return r if self.kind == PROMPT_ONLY else r[0]

    def prompts(self) -> "Dataset":
        return Dataset(PROMPT_ONLY, [self.prompt(i) for i in range(len(self))])


def _parse_tokens(text, lineno):
    try:
        return tuple(int(t) for t in text.split())
    except ValueError:
        raise DatasetFormatError(f"non-integer token in {text.strip()!r}", lineno) from None


def _as_response(tokens, vocab, lineno):
    y = tokens if tokens[:1] == (vocab.bos_id,) else (vocab.bos_id,) + tokens
    try:
        return vocab.check_sequence(y)
    except ValueError as e:
        raise DatasetFormatError(str(e), lineno) from None


def load_dataset(path, kind: str, vocab: Vocab) -> Dataset:
    """Parse a dataset file.

    One record per line: prompt tokens, then ``|`` and the response tokens.
    Teacher-behavior files separate several responses with ``;``.  Lines
    starting with ``#`` and blank lines are skipped.  A leading BOS on a
    response is optional.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if len(parts) > 2:
                raise DatasetFormatError("more than one '|' separator", lineno)
            x = _parse_tokens(parts[0], lineno)
            try:
                x = vocab.check_prompt(x)
            except ValueError as e:
                raise DatasetFormatError(str(e), lineno) from None
            if kind == PROMPT_ONLY:
                # a response column is tolerated and ignored
                records.append(x)
                continue
            if len(parts) != 2:
                raise DatasetFormatError("missing '|' response separator", lineno)
            chunks = parts[1].split(";")
            if kind == PROMPT_RESPONSE:
                if len(chunks) != 1:
                    raise DatasetFormatError("';' only allowed in teacher-behavior files", lineno)
                records.append((x, _as_response(_parse_tokens(chunks[0], lineno), vocab, lineno)))
            else:
                ys = [_as_response(_parse_tokens(c, lineno), vocab, lineno) for c in chunks]
                records.append((x, ys))
    return Dataset(kind, records)


def _fmt(tokens):
    return " ".join(str(t) for t in tokens)


def write_dataset(ds: Dataset, path, vocab: Vocab) -> None:
    """Write ``ds`` in the line format read by :func:`load_dataset` (BOS omitted)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {ds.kind}\n")
        for r in ds.records:
            if ds.kind == PROMPT_ONLY:
                fh.write(_fmt(r) + "\n")
            elif ds.kind == PROMPT_RESPONSE:
                fh.write(f"{_fmt(r[0])} | {_fmt(r[1][1:])}\n")
            else:
                fh.write(f"{_fmt(r[0])} | " + " ; ".join(_fmt(y[1:]) for y in r[1]) + "\n")
