"""Byte-level corpora: ingestion, train/validation split and batch sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import InsufficientDataError, InvalidArgumentError
from .model import Batch

BYTE_VOCAB = 256
CORPUS_TOKENS = "tokens.u8"
CORPUS_SIDECAR = "corpus.json"


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray  # uint8 token ids
    val: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return BYTE_VOCAB


def content_hash(raw: bytes) -> str:
    """Git blob hash of ``raw`` (sha1 over ``b"blob <len>\\0" + raw``)."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(raw))
    h.update(raw)
    return h.hexdigest()


def read_files(paths: Iterable[str | Path]) -> bytes:
    """Concatenate files in the given order."""
    chunks = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"corpus file not found: {p}")
        chunks.append(p.read_bytes())
    return b"".join(chunks)


def build_corpus(
    raw: bytes,
    val_fraction: float = 0.01,
    seed: int = 0,
    seq_len: int = 256,
    source: str = "<bytes>",
) -> Corpus:
    """Split ``raw`` into a training head and a contiguous validation tail.

    The tail split keeps documents from straddling train and validation.
    ``seed`` is recorded for batch sampling; the split itself does not use it.
    """
    if not 0 < val_fraction < 0.5:
        raise InvalidArgumentError(f"val_fraction must lie in (0, 0.5), got {val_fraction}")
    if len(raw) < 10 * seq_len:
        raise InsufficientDataError(
            f"corpus has {len(raw):,} bytes; need at least {10 * seq_len:,} (10 x seq_len)"
        )
    tokens = np.frombuffer(bytes(raw), dtype=np.uint8)
    n_val = max(1, round(len(tokens) * val_fraction))
    split = len(tokens) - n_val
    meta = {
        "source": source,
        "seed": seed,
        "val_fraction": val_fraction,
        "split_offset": split,
        "n_train": split,
        "n_val": n_val,
        "content_hash": content_hash(bytes(raw)),
    }
    return Corpus(train=tokens[:split].copy(), val=tokens[split:].copy(), meta=meta)


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.concatenate([corpus.train, corpus.val]).astype(np.uint8).tofile(directory / CORPUS_TOKENS)
    (directory / CORPUS_SIDECAR).write_text(json.dumps(corpus.meta, indent=2))
    return directory


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    meta = json.loads((directory / CORPUS_SIDECAR).read_text())
    tokens = np.fromfile(directory / CORPUS_TOKENS, dtype=np.uint8)
    split = meta["split_offset"]
    if split + meta["n_val"] != len(tokens):
        raise InvalidArgumentError(f"corpus sidecar does not match token file in {directory}")
    return Corpus(train=tokens[:split].copy(), val=tokens[split:].copy(), meta=meta)


def next_batch(corpus: Corpus, batch_size: int, seq_len: int, rng: np.random.Generator) -> Batch:
    """``batch_size`` random training windows of ``seq_len + 1`` tokens."""
    n = len(corpus.train)
    if n <= seq_len + 1:
        raise InsufficientDataError(f"training split has {n} tokens; seq_len {seq_len} needs more")
    starts = rng.integers(0, n - seq_len, size=batch_size)
    windows = np.stack([corpus.train[s : s + seq_len + 1] for s in starts]).astype(np.int64)
    windows = torch.from_numpy(windows)
    return Batch(inputs=windows[:, :-1], targets=windows[:, 1:])


def unigram_perplexity(corpus: Corpus) -> float:
    """Validation perplexity of an add-one-smoothed byte unigram model fit on train."""
    counts = np.bincount(corpus.train, minlength=BYTE_VOCAB).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return math.exp(-float(logp[corpus.val].mean()))
