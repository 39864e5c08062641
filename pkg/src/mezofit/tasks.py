"""Deterministic synthetic sequence tasks for desk-scale fine-tuning runs.

Every sample is a pure function of (task seed, split, sample index), so
train and eval splits are disjoint by index partition and runs are exactly
reproducible. Target grids use -1 for positions excluded from the loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from mezofit.memory import ConfigError
from mezofit.zo import splitmix64

_EVAL_INDEX_BASE = 1 << 40  # train uses [0, 2^40), eval starts here

SEP_TOKEN = 0     # sequence-copy separator
QMARK_TOKEN = 2   # binary-qa "question mark"


class TaskKind(str, Enum):
    SEQUENCE_COPY = "sequence_copy"
    NEXT_TOKEN_SYNTHETIC = "next_token_synthetic"
    BINARY_QA_SYNTHETIC = "binary_qa_synthetic"


@dataclass(frozen=True)
class ToyTask:
    kind: TaskKind
    vocab_size: int
    seq_len: int
    seed: int

    def __post_init__(self) -> None:
        if self.vocab_size < 2 or self.seq_len < 2:
            raise ConfigError("vocab_size and seq_len must be at least 2")
        if self.kind is TaskKind.SEQUENCE_COPY:
            if self.seq_len % 2 == 0 or self.seq_len < 3:
                raise ConfigError("sequence_copy needs an odd seq_len >= 3 "
                                  "(pattern, separator, pattern)")
            if self.vocab_size < 3:
                raise ConfigError("sequence_copy needs vocab_size >= 3")
        if self.kind is TaskKind.BINARY_QA_SYNTHETIC:
            if self.seq_len < 4:
                raise ConfigError("binary_qa needs seq_len >= 4")
            if self.vocab_size < 5:
                raise ConfigError("binary_qa needs vocab_size >= 5 "
                                  "(answers 0/1, marker, question tokens)")

    # -- deterministic generators -------------------------------------------

    def _rng(self, index: int, salt: int = 0) -> np.random.Generator:
        key = np.array([splitmix64(self.seed ^ salt) & ((1 << 64) - 1),
                        index & ((1 << 64) - 1)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def _markov_successors(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-token successor table of the synthetic next-token chain.

        Fanout 2 with a 0.9/0.1 split: the argmax-accuracy ceiling is 0.9 and
        the dominant successor gives a dense, mostly-clean learning signal.
        """
        gen = self._rng(0, salt=0x6D61726B)
        fanout = min(2, self.vocab_size)
        succ = np.empty((self.vocab_size, fanout), dtype=np.int64)
        for v in range(self.vocab_size):
            succ[v] = gen.permutation(self.vocab_size)[:fanout]
        probs = np.array([0.9, 0.1][:fanout])
        return succ, probs / probs.sum()

    def sample(self, index: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """One (tokens, targets) pair, each of length seq_len."""
        if split not in ("train", "eval"):
            raise ValueError(f"split must be train or eval, got {split!r}")
        idx = index + (_EVAL_INDEX_BASE if split == "eval" else 0)
        gen = self._rng(idx, salt=0x73616D70)
        tokens = np.empty(self.seq_len, dtype=np.int64)
        targets = np.full(self.seq_len, -1, dtype=np.int64)

        if self.kind is TaskKind.SEQUENCE_COPY:
            p = (self.seq_len - 1) // 2
            pattern = gen.integers(1, self.vocab_size, size=p)
            tokens[:p] = pattern
            tokens[p] = SEP_TOKEN
            tokens[p + 1:] = pattern
            targets[p:-1] = pattern  # from the separator on, predict the copy
        elif self.kind is TaskKind.NEXT_TOKEN_SYNTHETIC:
            succ, probs = self._markov_successors()
            tokens[0] = gen.integers(0, self.vocab_size)
            choices = gen.choice(len(probs), size=self.seq_len - 1, p=probs)
            for i in range(1, self.seq_len):
                tokens[i] = succ[tokens[i - 1], choices[i - 1]]
            targets[:-1] = tokens[1:]
        else:  # BINARY_QA_SYNTHETIC
            q_len = self.seq_len - 2
            q = gen.integers(3, self.vocab_size, size=q_len)
            tokens[:q_len] = q
            tokens[q_len] = QMARK_TOKEN
            answer = int((q[0] + q[-1]) % 2)
            tokens[q_len + 1] = answer
            targets[q_len] = answer  # the marker position predicts the answer
        return tokens, targets

    def batch(self, indices, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.sample(i, split) for i in indices]
        tokens = np.stack([t for t, _ in pairs])
        targets = np.stack([y for _, y in pairs])
        return tokens, targets

    def eval_batch(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        return self.batch(range(count), split="eval")


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of argmax predictions matching targets at unmasked positions."""
    targets = np.asarray(targets)
    mask = targets >= 0
    if not mask.any():
        raise ValueError("no unmasked target positions")
    pred = logits.argmax(axis=-1)
    return float(np.mean(pred[mask] == targets[mask]))
