"""Deterministic synthetic classification tasks sized so fine-tuning matters.

Two kinds:
  - majority_token: label = class of the most frequent token (ties -> smallest
    token id). Learnable from the pooled token bag, no attention needed.
  - key_lookup: label = class of the token immediately following the key token
    (id 0). The key appears exactly once and its successor is the only token
    drawn from the answer range [vocab - n_classes, vocab), so the signal is a
    rare content token the attention layers must route past the fillers.

class(t) = t mod n_classes throughout. Generation is a pure function of the
spec; the three splits use disjoint RNG streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .linalg import Rng
from .model import Batch

KEY_TOKEN = 0


class TaskKind(str, Enum):
    MAJORITY_TOKEN = "majority_token"
    KEY_LOOKUP = "key_lookup"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    n_train: int
    n_val: int
    n_test: int
    seq_len: int
    vocab_size: int
    n_classes: int
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes > self.vocab_size:
            raise ValueError(f"n_classes {self.n_classes} exceeds vocab_size {self.vocab_size}")
        for name in ("n_train", "n_val", "n_test", "seq_len", "vocab_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"TaskSpec.{name} must be >= 1, got {getattr(self, name)}")
        if TaskKind(self.kind) is TaskKind.KEY_LOOKUP:
            if self.seq_len < 2:
                raise ValueError("key_lookup needs seq_len >= 2")
            if self.vocab_size < self.n_classes + 2:
                raise ValueError("key_lookup needs vocab_size >= n_classes + 2 (key + filler)")


def token_class(token: int, n_classes: int) -> int:
    return int(token) % n_classes


def majority_label(tokens: np.ndarray, n_classes: int) -> int:
    """Class of the most frequent token; frequency ties go to the smallest id."""
    counts = np.bincount(np.asarray(tokens, dtype=np.int64))
    return token_class(int(np.argmax(counts)), n_classes)


def key_lookup_label(tokens: np.ndarray, n_classes: int) -> int:
    """Class of the token right after the (unique) key token."""
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.nonzero(tokens == KEY_TOKEN)[0]
    if positions.size != 1:
        raise ValueError(f"expected exactly one key token, found {positions.size}")
    pos = int(positions[0])
    if pos + 1 >= tokens.shape[0]:
        raise ValueError("key token has no successor")
    return token_class(int(tokens[pos + 1]), n_classes)


@dataclass
class Dataset:
    tokens: np.ndarray  # [n, seq_len] int64
    labels: np.ndarray  # [n] int64

    @property
    def n(self) -> int:
        return int(self.tokens.shape[0])

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(tokens=self.tokens[idx], labels=self.labels[idx])

    def batches(self, batch_size: int, rng: Rng | None = None):
        """Yield batches in order, or shuffled when an rng is given."""
        order = rng.permutation(self.n) if rng is not None else np.arange(self.n)
        for start in range(0, self.n, batch_size):
            yield self.batch(order[start : start + batch_size])

    def subset(self, n: int) -> "Dataset":
        return Dataset(tokens=self.tokens[:n], labels=self.labels[:n])


def _gen_majority(spec: TaskSpec, rng: Rng, n: int) -> Dataset:
    majors = np.asarray(rng.integers(0, spec.vocab_size, size=n))
    fill = np.asarray(rng.integers(0, spec.vocab_size, size=(n, spec.seq_len)))
    keep = np.asarray(rng.uniform(size=(n, spec.seq_len))) < 0.5
    tokens = np.where(keep, majors[:, None], fill).astype(np.int64)
    labels = np.array([majority_label(row, spec.n_classes) for row in tokens], dtype=np.int64)
    return Dataset(tokens=tokens, labels=labels)


def _gen_key_lookup(spec: TaskSpec, rng: Rng, n: int) -> Dataset:
    answer_base = spec.vocab_size - spec.n_classes
    # fillers exclude the key (0) and the answer range
    tokens = np.asarray(rng.integers(1, answer_base, size=(n, spec.seq_len)), dtype=np.int64)
    positions = np.asarray(rng.integers(0, spec.seq_len - 1, size=n))
    answers = answer_base + np.asarray(rng.integers(0, spec.n_classes, size=n))
    rows = np.arange(n)
    tokens[rows, positions] = KEY_TOKEN
    tokens[rows, positions + 1] = answers
    labels = np.array([key_lookup_label(row, spec.n_classes) for row in tokens], dtype=np.int64)
    return Dataset(tokens=tokens, labels=labels)


def generate(spec: TaskSpec) -> tuple[Dataset, Dataset, Dataset]:
    """(train, val, test) datasets; deterministic per seed, disjoint streams."""
    spec.validate()
    kind = TaskKind(spec.kind)
    root = Rng(spec.seed)
    gen = _gen_majority if kind is TaskKind.MAJORITY_TOKEN else _gen_key_lookup
    return (
        gen(spec, root.split("train"), spec.n_train),
        gen(spec, root.split("val"), spec.n_val),
        gen(spec, root.split("test"), spec.n_test),
    )


def relabel(dataset: Dataset, kind: TaskKind, n_classes: int) -> np.ndarray:
    """Recompute every label from tokens alone (independent check path)."""
    labeler = majority_label if TaskKind(kind) is TaskKind.MAJORITY_TOKEN else key_lookup_label
    return np.array([labeler(row, n_classes) for row in dataset.tokens], dtype=np.int64)


def export_jsonl(dataset: Dataset, path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(dataset.tokens, dataset.labels):
            fh.write(json.dumps({"tokens": row.tolist(), "label": int(label)}) + "\n")


def import_jsonl(path: Path | str) -> Dataset:
    tokens, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            tokens.append(record["tokens"])
            labels.append(record["label"])
    return Dataset(tokens=np.array(tokens, dtype=np.int64), labels=np.array(labels, dtype=np.int64))
