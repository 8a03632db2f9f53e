import hashlib
import math
import subprocess

import numpy as np
import pytest

from lws_forge.data import (
    BYTE_VOCAB,
    build_corpus,
    content_hash,
    load_corpus,
    next_batch,
    read_files,
    save_corpus,
    unigram_perplexity,
)
from lws_forge.errors import InsufficientDataError, InvalidArgumentError

RAW = bytes(np.random.default_rng(0).integers(0, 256, 1_000_000, dtype=np.uint8))


def test_split_sizes():
    c = build_corpus(RAW, 0.01, seed=0)
    assert abs(len(c.val) - 10_000) <= 1
    assert len(c.train) + len(c.val) == len(RAW)
    # contiguous tail: train then val reproduce the raw stream
    assert bytes(np.concatenate([c.train, c.val])) == RAW
    assert c.meta["split_offset"] == len(c.train)
    assert c.vocab_size == BYTE_VOCAB


def test_split_deterministic():
    a, b = build_corpus(RAW, 0.02, seed=3), build_corpus(RAW, 0.02, seed=3)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.val, b.val) and a.meta == b.meta


@pytest.mark.parametrize("frac", [0.0, 0.5, 0.6, -0.1])
def test_bad_val_fraction(frac):
    with pytest.raises(InvalidArgumentError):
        build_corpus(RAW, frac)


def test_too_small():
    with pytest.raises(InsufficientDataError):
        build_corpus(b"x" * 2559, 0.1, seq_len=256)


def test_content_hash_matches_git(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(RAW[:5000])
    git = subprocess.run(["git", "hash-object", str(path)], capture_output=True, text=True)
    if git.returncode != 0:
        pytest.skip("git not available")
    assert content_hash(RAW[:5000]) == git.stdout.strip()
    assert content_hash(b"") == hashlib.sha1(b"blob 0\0").hexdigest()


def test_read_files_concatenates(tmp_path):
    (tmp_path / "a").write_bytes(b"abc")
    (tmp_path / "b").write_bytes(b"de")
    assert read_files([tmp_path / "a", tmp_path / "b"]) == b"abcde"
    with pytest.raises(FileNotFoundError):
        read_files([tmp_path / "missing"])


def test_save_load_roundtrip(tmp_path):
    c = build_corpus(RAW[:100_000], 0.05)
    back = load_corpus(save_corpus(c, tmp_path / "c"))
    assert np.array_equal(back.train, c.train) and np.array_equal(back.val, c.val)
    assert back.meta == c.meta


def test_batch_shift_contract():
    c = build_corpus(RAW, 0.01)
    b = next_batch(c, 4, 128, np.random.default_rng(0))
    assert b.inputs.shape == (4, 128) and b.targets.shape == (4, 128)
    assert (b.targets[:, :-1] == b.inputs[:, 1:]).all()


def test_batch_deterministic_with_cloned_rng():
    c = build_corpus(RAW, 0.01)
    rng = np.random.default_rng(7)
    twin = np.random.default_rng(7)
    a, b = next_batch(c, 4, 64, rng), next_batch(c, 4, 64, twin)
    assert (a.inputs == b.inputs).all() and (a.targets == b.targets).all()


def test_windows_stay_in_train():
    # small train region with a recognizable validation tail
    raw = bytes([1]) * 3000 + bytes([255]) * 1000
    c = build_corpus(raw, 0.25, seq_len=64)
    rng = np.random.default_rng(0)
    for _ in range(10_000 // 16):
        b = next_batch(c, 16, 64, rng)
        assert (b.inputs == 1).all() and (b.targets == 1).all()


def test_seq_len_exceeds_train():
    c = build_corpus(bytes(3000), 0.1, seq_len=64)
    with pytest.raises(InsufficientDataError):
        next_batch(c, 1, 5000, np.random.default_rng(0))


def test_unigram_perplexity_oracle():
    raw = b"aab" * 1000
    c = build_corpus(raw, 0.1, seq_len=8)
    counts = np.ones(256)
    for ch in raw[: len(c.train)]:
        counts[ch] += 1
    p = counts / counts.sum()
    want = math.exp(-np.mean([math.log(p[ch]) for ch in raw[len(c.train):]]))
    assert unigram_perplexity(c) == pytest.approx(want, rel=1e-12)


def test_unigram_uniform_bytes_near_256():
    c = build_corpus(RAW, 0.05)
    assert unigram_perplexity(c) == pytest.approx(256, rel=0.01)
