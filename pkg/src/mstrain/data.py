"""Token files, a synthetic Markov corpus and (tokens, labels) batching.

A token file is a bare array of little-endian uint32 ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import IGNORE_INDEX

TOKEN_DTYPE = np.dtype("<u4")

# Synthetic chain: with probability RESET_P the next token comes from a
# Zipf-like base distribution, otherwise it is the previous token's fixed
# successor shifted by a small random offset.
RESET_P = 0.3
ZIPF_A = 1.1
SUCC_OFFSETS = (0, 1, 2)
SUCC_WEIGHTS = (0.6, 0.3, 0.1)


class EndOfData(Exception):
    pass


@dataclass
class Batch:
    tokens: np.ndarray  # [B, S] int64
    labels: np.ndarray  # [B, S] int64, IGNORE_INDEX on the last position

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tokens, self.labels


class TokenFile:
    def __init__(self, path: str | Path, vocab: int | None = None):
        self.path = Path(path)
        size = self.path.stat().st_size
        if size % TOKEN_DTYPE.itemsize:
            raise ValueError(f"{self.path}: size {size} is not a multiple of 4")
        self.count = size // TOKEN_DTYPE.itemsize
        self.vocab = vocab
        if vocab is not None and self.count:
            top = int(self.read(0, self.count).max())
            if top >= vocab:
                raise ValueError(f"{self.path}: token id {top} >= vocab {vocab}")

    def read(self, start: int, n: int) -> np.ndarray:
        if start < 0 or start + n > self.count:
            raise EndOfData(f"{self.path}: need tokens [{start},{start + n}) of {self.count}")
        arr = np.fromfile(self.path, dtype=TOKEN_DTYPE, count=n, offset=start * TOKEN_DTYPE.itemsize)
        return arr.astype(np.int64)

    def __len__(self) -> int:
        return self.count

    @staticmethod
    def write(path: str | Path, tokens: np.ndarray) -> "TokenFile":
        path = Path(path)
        arr = np.asarray(tokens)
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
            raise ValueError("token ids must fit in uint32")
        arr.astype(TOKEN_DTYPE).tofile(path)
        return TokenFile(path)


# -- synthetic corpus ----------------------------------------------------


@dataclass(frozen=True)
class MarkovChain:
    vocab: int
    base: np.ndarray  # [V] reset distribution
    succ: np.ndarray  # [V] successor permutation

    @classmethod
    def from_seed(cls, seed: int, vocab: int) -> "MarkovChain":
        if vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {vocab}")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        ranks = rng.permutation(vocab)
        base = 1.0 / (ranks + 1.0) ** ZIPF_A
        base /= base.sum()
        succ = rng.permutation(vocab)
        return cls(vocab, base, succ)

    def transition(self) -> np.ndarray:
        """Dense ``P[prev, next]``."""
        v = self.vocab
        p = np.tile(RESET_P * self.base, (v, 1))
        rows = np.arange(v)
        for off, w in zip(SUCC_OFFSETS, SUCC_WEIGHTS):
            np.add.at(p, (rows, (self.succ + off) % v), (1.0 - RESET_P) * w)
        return p

    def stationary(self, tol: float = 1e-14, max_iter: int = 10_000) -> np.ndarray:
        p = self.transition()
        pi = np.full(self.vocab, 1.0 / self.vocab)
        for _ in range(max_iter):
            nxt = pi @ p
            if np.abs(nxt - pi).sum() < tol:
                return nxt
            pi = nxt
        return pi

    def unigram_entropy(self) -> float:
        """Entropy (nats) of the stationary token distribution."""
        pi = self.stationary()
        pi = pi[pi > 0]
        return float(-(pi * np.log(pi)).sum())

    def sample(self, length: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        reset = rng.random(length) < RESET_P
        fresh = rng.choice(self.vocab, size=length, p=self.base)
        offs = rng.choice(np.asarray(SUCC_OFFSETS), size=length, p=np.asarray(SUCC_WEIGHTS))
        out = np.empty(length, dtype=np.int64)
        succ = self.succ.tolist()
        v = self.vocab
        prev = int(fresh[0])
        reset_l, fresh_l, offs_l = reset.tolist(), fresh.tolist(), offs.tolist()
        for t in range(length):
            if t == 0 or reset_l[t]:
                prev = fresh_l[t]
            else:
                prev = (succ[prev] + offs_l[t]) % v
            out[t] = prev
        return out


def synth_corpus(seed: int, vocab: int, length: int, path: str | Path) -> TokenFile:
    chain = MarkovChain.from_seed(seed, vocab)
    TokenFile.write(path, chain.sample(length, seed))
    return TokenFile(path, vocab)


def sample_entropy(tokens: np.ndarray, vocab: int) -> float:
    counts = np.bincount(np.asarray(tokens), minlength=vocab).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# -- batching ------------------------------------------------------------


def make_labels(tokens: np.ndarray) -> np.ndarray:
    """Shift left by one within each row; the last position is ignored."""
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.full_like(tokens, IGNORE_INDEX)
    labels[:, :-1] = tokens[:, 1:]
    return labels


def next_batch(tf: TokenFile, cursor: int, B: int, S: int) -> tuple[Batch, int]:
    """The ``B`` windows of ``S`` tokens starting at ``cursor``."""
    if B < 1 or S < 1:
        raise ValueError(f"B and S must be >= 1, got {B}, {S}")
    n = B * S
    if cursor + n > tf.count:
        raise EndOfData(f"{tf.path}: {tf.count - cursor} tokens left, batch needs {n}")
    tokens = tf.read(cursor, n).reshape(B, S)
    return Batch(tokens, make_labels(tokens)), cursor + n


def num_batches(tf: TokenFile, B: int, S: int) -> int:
    return tf.count // (B * S)
