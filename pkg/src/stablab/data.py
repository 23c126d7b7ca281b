"""Deterministic token streams for training and validation.

``synthetic_markov`` samples from a fixed sparse Markov chain (learnable
structure, no external data). ``bytes_corpus`` reads raw bytes of a text file
as tokens (vocab 256) with train/val taken from disjoint file regions.

Every batch is a pure function of ``(seed, split, batch_index)``.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

SPLITS = {"train": 0, "val": 1}
_HASH_MULT = np.random.default_rng(0x5EED).integers(1, 2**63, size=4096, dtype=np.uint64) | np.uint64(1)


@dataclasses.dataclass(frozen=True)
class BatchSource:
    kind: str = "synthetic_markov"
    vocab_size: int = 512
    seq_len: int = 128
    batch_size: int = 16
    seed: int = 0
    split_fraction: float = 0.1
    corpus_path: str | None = None
    branching: int = 4
    concentration: float = 0.5
    burn_in: int = 32

    def __post_init__(self):
        if self.kind not in ("synthetic_markov", "bytes_corpus"):
            raise ValueError(f"unknown batch source kind {self.kind!r}")
        if self.seq_len < 1 or self.batch_size < 1:
            raise ValueError("seq_len and batch_size must be positive")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.kind == "synthetic_markov" and not 2 <= self.branching <= self.vocab_size:
            raise ValueError("branching must be in [2, vocab_size]")
        if self.kind == "bytes_corpus":
            if not self.corpus_path:
                raise ValueError("bytes_corpus needs corpus_path")
            if self.vocab_size < 256:
                raise ValueError("bytes_corpus needs vocab_size >= 256")


class MarkovChain:
    """Sparse chain: each state has ``branching`` successors, one of them ``state + 1``."""

    def __init__(self, vocab_size, branching, concentration, seed):
        rng = np.random.default_rng([seed, 0xC0A1])
        v, k = vocab_size, branching
        nxt = (np.arange(v) + 1) % v
        scores = rng.random((v, v))
        scores[np.arange(v), nxt] = np.inf  # ring edge keeps the chain irreducible
        order = np.argsort(-scores, axis=1, kind="stable")
        self.successors = order[:, :k]
        self.probs = rng.dirichlet(np.full(k, concentration), size=v)
        self.cum = np.cumsum(self.probs, axis=1)
        self.cum[:, -1] = 1.0
        self.vocab_size = v

    def transition_matrix(self):
        p = np.zeros((self.vocab_size, self.vocab_size))
        rows = np.repeat(np.arange(self.vocab_size), self.successors.shape[1])
        np.add.at(p, (rows, self.successors.ravel()), self.probs.ravel())
        return p

    def step(self, states, u):
        idx = (u[:, None] >= self.cum[states]).sum(axis=1)
        return self.successors[states, idx]

    def sample(self, rng, n, length, burn_in):
        state = rng.integers(0, self.vocab_size, size=n)
        for _ in range(burn_in):
            state = self.step(state, rng.random(n))
        out = np.empty((n, length), dtype=np.int64)
        for t in range(length):
            out[:, t] = state
            state = self.step(state, rng.random(n))
        return out


def split_of(rows) -> np.ndarray:
    """Deterministic split id (0 train, 1 val) of each token row, by hashing its content."""
    rows = np.asarray(rows, dtype=np.uint64)
    w = _HASH_MULT[np.arange(rows.shape[1]) % _HASH_MULT.size]
    h = (rows * w).sum(axis=1, dtype=np.uint64)
    h ^= h >> np.uint64(31)
    h *= np.uint64(0x9E3779B97F4A7C15)
    h ^= h >> np.uint64(29)
    return (h & np.uint64(1)).astype(np.int64)


_CHAINS: dict = {}
_CORPORA: dict = {}


def chain_for(source: BatchSource) -> MarkovChain:
    key = (source.vocab_size, source.branching, source.concentration, source.seed)
    if key not in _CHAINS:
        _CHAINS[key] = MarkovChain(*key)
    return _CHAINS[key]


def _corpus(path):
    path = os.fspath(path)
    if path not in _CORPORA:
        try:
            _CORPORA[path] = np.fromfile(path, dtype=np.uint8)
        except OSError as exc:
            raise OSError(f"cannot read corpus {path!r}: {exc}") from exc
    return _CORPORA[path]


def next_batch(source: BatchSource, split: str, index: int) -> np.ndarray:
    """Batch ``index`` of ``split`` as an int64 matrix (batch, seq_len + 1)."""
    if split not in SPLITS:
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    sid = SPLITS[split]
    rng = np.random.default_rng([source.seed, sid + 1, index])
    width = source.seq_len + 1
    if source.kind == "bytes_corpus":
        return _corpus_batch(source, sid, rng, width)
    chain = chain_for(source)
    kept = []
    have = 0
    while have < source.batch_size:
        cand = chain.sample(rng, 2 * (source.batch_size - have) + 2, width, source.burn_in)
        cand = cand[split_of(cand) == sid]
        kept.append(cand)
        have += len(cand)
    return np.concatenate(kept)[: source.batch_size]


def _corpus_batch(source, sid, rng, width):
    data = _corpus(source.corpus_path)
    cut = int(len(data) * (1.0 - source.split_fraction))
    lo, hi = (0, cut) if sid == 0 else (cut, len(data))
    if hi - lo < width:
        raise ValueError(f"corpus region for split {sid} is shorter than seq_len + 1")
    starts = rng.integers(lo, hi - width + 1, size=source.batch_size)
    return data[starts[:, None] + np.arange(width)].astype(np.int64)


class BatchStream:
    """Iterator view over one split of a source."""

    def __init__(self, source: BatchSource, split="train", start=0):
        self.source, self.split, self.index = source, split, start

    def __iter__(self):
        return self

    def __next__(self):
        batch = next_batch(self.source, self.split, self.index)
        self.index += 1
        return batch
