"""Synthetic sequence-to-sequence tasks and deterministic data splits.

Three desk-scale tasks exercise the search:

* sequence-copy: the decoder reproduces the encoder input.
* parity-classification: one label token encodes the XOR of the lowest
  bit of every input token.
* key-value-recall: the encoder holds (key, value) pairs plus a query
  key; the decoder, given the query key, must emit the paired value.

Examples across the train/val/test splits are unique rows by
construction, and regeneration from the seed is exact. Token id 0 is
reserved as the decoder start symbol.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict

import numpy as np

from s3pet.errors import ConfigError
from s3pet.rng import stream

BOS = 0
# Parity label tokens.
LABEL_BASE = 1
# First id usable as sequence content.
CONTENT_BASE = 3

SEQUENCE_COPY = "sequence-copy"
PARITY = "parity-classification"
KEY_VALUE_RECALL = "key-value-recall"
TASK_KINDS = (SEQUENCE_COPY, PARITY, KEY_VALUE_RECALL)

Batch = Dict[str, np.ndarray]


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = KEY_VALUE_RECALL
    vocab_size: int = 64
    seq_len: int = 9
    train_size: int = 512
    val_size: int = 128
    test_size: int = 256
    label_space: int = 0  # 0 means the kind's natural default
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        for name in ("vocab_size", "seq_len", "train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task: {name} must be positive")
        if self.vocab_size <= CONTENT_BASE + 1:
            raise ConfigError("task: vocab_size too small for reserved ids plus content")
        if self.kind == PARITY and self.label_space not in (0, 2):
            raise ConfigError("task: parity-classification has a fixed label space of 2")
        if self.kind == KEY_VALUE_RECALL:
            if self.seq_len < 3 or self.seq_len % 2 == 0:
                raise ConfigError("task: key-value-recall needs odd seq_len >= 3 (pairs plus query)")
            n_values = self._kv_pools()[1]
            if self.label_space not in (0, n_values):
                raise ConfigError(f"task: key-value-recall label space is the value pool size {n_values}")

    def _kv_pools(self) -> tuple[int, int]:
        """(n_keys, n_values): content ids split evenly between the pools."""
        usable = self.vocab_size - CONTENT_BASE
        n_keys = usable // 2
        return n_keys, usable - n_keys

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"task config: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class DataSplit:
    """Disjoint example pools: two search halves plus validation and test."""

    delta: Batch
    alpha: Batch
    val: Batch
    test: Batch

    def train_pool(self) -> Batch:
        """The full training pool (both search halves), used for retraining."""
        return {
            k: np.concatenate([self.delta[k], self.alpha[k]], axis=0)
            for k in self.delta
        }


def _gen_copy(task: SyntheticTask, rng: np.random.Generator, n: int) -> Batch:
    src = rng.integers(CONTENT_BASE, task.vocab_size, size=(n, task.seq_len))
    dec_in = np.concatenate([np.full((n, 1), BOS, dtype=src.dtype), src[:, :-1]], axis=1)
    return {"src": src, "dec_in": dec_in, "tgt": src.copy()}


def _gen_parity(task: SyntheticTask, rng: np.random.Generator, n: int) -> Batch:
    src = rng.integers(CONTENT_BASE, task.vocab_size, size=(n, task.seq_len))
    labels = np.bitwise_xor.reduce(src & 1, axis=1)
    return {
        "src": src,
        "dec_in": np.full((n, 1), BOS, dtype=src.dtype),
        "tgt": (LABEL_BASE + labels).reshape(n, 1),
    }


def _gen_key_value(task: SyntheticTask, rng: np.random.Generator, n: int) -> Batch:
    n_keys, n_values = task._kv_pools()
    n_pairs = (task.seq_len - 1) // 2
    if n_pairs > n_keys:
        raise ConfigError("task: not enough distinct keys for the requested seq_len")
    key_base = CONTENT_BASE
    value_base = CONTENT_BASE + n_keys
    src = np.empty((n, task.seq_len), dtype=np.int64)
    tgt = np.empty((n, 1), dtype=np.int64)
    dec_in = np.empty((n, 1), dtype=np.int64)
    for i in range(n):
        keys = key_base + rng.choice(n_keys, size=n_pairs, replace=False)
        values = value_base + rng.integers(0, n_values, size=n_pairs)
        q = rng.integers(0, n_pairs)
        src[i, : 2 * n_pairs : 2] = keys
        src[i, 1 : 2 * n_pairs : 2] = values
        src[i, -1] = keys[q]
        dec_in[i, 0] = keys[q]
        tgt[i, 0] = values[q]
    return {"src": src, "dec_in": dec_in, "tgt": tgt}


_GENERATORS = {SEQUENCE_COPY: _gen_copy, PARITY: _gen_parity, KEY_VALUE_RECALL: _gen_key_value}


def _unique_examples(task: SyntheticTask, total: int) -> Batch:
    """Generate until `total` unique (src, dec_in) rows exist."""
    gen = _GENERATORS[task.kind]
    rng = stream(task.seed, f"task:{task.kind}")
    seen: set = set()
    parts: list[Batch] = []
    have = 0
    attempts = 0
    while have < total:
        batch = gen(task, rng, total - have)
        keep = []
        for i in range(batch["src"].shape[0]):
            key = (batch["src"][i].tobytes(), batch["dec_in"][i].tobytes())
            if key not in seen:
                seen.add(key)
                keep.append(i)
        if keep:
            parts.append({k: v[keep] for k, v in batch.items()})
            have += len(keep)
        attempts += 1
        if attempts > 1000:
            raise ConfigError("task: example space too small for disjoint splits of this size")
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def generate_task(task: SyntheticTask) -> DataSplit:
    """Deterministic disjoint splits; the train pool is halved for search."""
    total = task.train_size + task.val_size + task.test_size
    pool = _unique_examples(task, total)
    train = {k: v[: task.train_size] for k, v in pool.items()}
    val = {k: v[task.train_size : task.train_size + task.val_size] for k, v in pool.items()}
    test = {k: v[task.train_size + task.val_size :] for k, v in pool.items()}
    half = task.train_size // 2
    delta = {k: v[:half] for k, v in train.items()}
    alpha = {k: v[half:] for k, v in train.items()}
    return DataSplit(delta=delta, alpha=alpha, val=val, test=test)


class BatchStream:
    """Cycling minibatch iterator with its own shuffle stream."""

    def __init__(self, data: Batch, batch_size: int, seed: int, name: str):
        self.data = data
        self.n = data["src"].shape[0]
        self.batch_size = min(batch_size, self.n)
        self._rng = stream(seed, f"batches:{name}")
        self._order = np.arange(self.n)
        self._pos = self.n  # force a shuffle on first draw

    def __next__(self) -> Batch:
        if self._pos + self.batch_size > self.n:
            self._rng.shuffle(self._order)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return {k: v[idx] for k, v in self.data.items()}
