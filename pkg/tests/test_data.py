import numpy as np
import pytest

from stablab.data import BatchSource, BatchStream, MarkovChain, chain_for, next_batch, split_of


def test_same_index_same_batch_and_range():
    src = BatchSource(vocab_size=97, seq_len=12, batch_size=5, seed=3)
    a, b = next_batch(src, "train", 7), next_batch(src, "train", 7)
    assert a.shape == (5, 13) and a.dtype == np.int64
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, next_batch(src, "train", 8))
    assert a.min() >= 0 and a.max() < 97


def test_batches_follow_the_chain():
    src = BatchSource(vocab_size=50, seq_len=20, batch_size=4)
    chain = chain_for(src)
    p = chain.transition_matrix()
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    b = next_batch(src, "val", 0)
    assert np.all(p[b[:, :-1], b[:, 1:]] > 0)


def test_unigram_matches_stationary_distribution():
    src = BatchSource(vocab_size=512, seq_len=128, batch_size=16, seed=0)
    p = chain_for(src).transition_matrix()
    pi = np.full(512, 1 / 512)
    for _ in range(5000):  # power iteration for the stationary law
        pi = pi @ p
    counts = np.zeros(512)
    n = 0
    i = 0
    while n < 1_000_000:
        b = next_batch(src, "train", i)
        counts += np.bincount(b.ravel(), minlength=512)
        n += b.size
        i += 1
    tv = 0.5 * np.abs(counts / n - pi).sum()
    assert tv < 0.02


def test_train_and_val_never_collide():
    src = BatchSource(vocab_size=64, seq_len=8, batch_size=4, seed=1)
    seen = {"train": set(), "val": set()}
    for split in seen:
        for i in range(10_000):
            seen[split].update(map(bytes, next_batch(src, split, i).astype(np.int16)))
    assert seen["train"] and seen["val"]
    assert not seen["train"] & seen["val"]


def test_split_hash_is_content_based():
    rows = np.random.default_rng(0).integers(0, 100, size=(2000, 9))
    s = split_of(rows)
    np.testing.assert_array_equal(s, split_of(rows.copy()))
    assert 0.4 < s.mean() < 0.6


def test_chain_is_irreducible_ring():
    c = MarkovChain(30, 3, 0.5, seed=2)
    assert all((i + 1) % 30 in c.successors[i] for i in range(30))


def test_corpus_mode(tmp_path):
    path = tmp_path / "c.txt"
    path.write_bytes(bytes(range(256)) * 8)
    src = BatchSource(kind="bytes_corpus", vocab_size=256, seq_len=7, batch_size=3, corpus_path=str(path))
    tr = next_batch(src, "train", 0)
    assert tr.shape == (3, 8) and tr.max() < 256
    np.testing.assert_array_equal(np.diff(tr, axis=1) % 256, 1)
    va = next_batch(src, "val", 0)
    assert va.shape == (3, 8)
    with pytest.raises(OSError):
        next_batch(BatchSource(kind="bytes_corpus", corpus_path=str(tmp_path / "missing")), "train", 0)


def test_validation():
    with pytest.raises(ValueError):
        BatchSource(kind="wiki")
    with pytest.raises(ValueError):
        BatchSource(kind="bytes_corpus")
    with pytest.raises(ValueError):
        next_batch(BatchSource(), "test", 0)


def test_stream_iterates_indices():
    src = BatchSource(vocab_size=20, seq_len=4, batch_size=2)
    it = BatchStream(src, "val", start=3)
    np.testing.assert_array_equal(next(it), next_batch(src, "val", 3))
    np.testing.assert_array_equal(next(it), next_batch(src, "val", 4))
