"""Byte-stream ingestion, sentinel vocabulary, and deterministic batching.

The vocabulary has 320 ids: 0..255 are raw byte values, 256..319 are
reserved sentinels (bos=256, pad=257, the rest unused). A corpus is cut
into non-overlapping windows of ``seq_len`` data bytes; the final short
window is padded and its padded targets masked. Window order is shuffled
deterministically by seed, so batch streams are bit-identical across runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

VOCAB_SIZE = 320
BOS_ID = 256
PAD_ID = 257


@dataclass(frozen=True)
class Vocab:
    size: int = VOCAB_SIZE
    bos_id: int = BOS_ID
    pad_id: int = PAD_ID


@dataclass
class Batch:
    """ids/targets/target_mask are [B, S+1]; position i predicts ids[i+1].

    Position 0 is bos, so every data byte of a window is predicted exactly
    once; the final position's target is pad and masked from the loss.
    """
    ids: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray

    @property
    def n_positions(self) -> int:
        return self.ids.shape[1]


def encode(raw: bytes) -> np.ndarray:
    """bos followed by the raw byte values, one id per byte."""
    out = np.empty(len(raw) + 1, dtype=np.int64)
    out[0] = BOS_ID
    if raw:
        out[1:] = np.frombuffer(raw, dtype=np.uint8)
    return out


def decode(ids) -> bytes:
    """Inverse of encode on data positions; sentinel ids are dropped."""
    arr = np.asarray(ids, dtype=np.int64)
    return bytes(arr[arr < 256].astype(np.uint8).tolist())


def window_starts(n: int, seq_len: int) -> list[int]:
    return list(range(0, n, seq_len))


def _window_to_row(window: bytes, seq_len: int):
    w = len(window)
    ids = np.full(seq_len + 1, PAD_ID, dtype=np.int64)
    ids[0] = BOS_ID
    ids[1:w + 1] = np.frombuffer(window, dtype=np.uint8)
    targets = np.full(seq_len + 1, PAD_ID, dtype=np.int64)
    targets[:seq_len] = ids[1:]
    mask = np.zeros(seq_len + 1, dtype=bool)
    mask[:w] = True
    return ids, targets, mask, w


def make_batches(corpus: bytes, seq_len: int, batch_size: int,
                 seed: int) -> Iterator[Batch]:
    """Shuffled non-overlapping windows grouped into batches.

    Empty corpus yields an empty stream. The same (corpus, seq_len,
    batch_size, seed) always produces the identical batch sequence.
    """
    if seq_len < 2:
        raise ValueError(f"seq_len must be >= 2, got {seq_len}")
    starts = window_starts(len(corpus), seq_len)
    if not starts:
        return
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(starts))
    for i in range(0, len(order), batch_size):
        group = [starts[j] for j in order[i:i + batch_size]]
        rows = [_window_to_row(corpus[s:s + seq_len], seq_len) for s in group]
        yield Batch(ids=np.stack([r[0] for r in rows]),
                    targets=np.stack([r[1] for r in rows]),
                    target_mask=np.stack([r[2] for r in rows]))


def eval_batches(data: bytes, seq_len: int, batch_size: int) -> Iterator[Batch]:
    """Windows in file order, unshuffled, for evaluation passes."""
    starts = window_starts(len(data), seq_len)
    for i in range(0, len(starts), batch_size):
        rows = [_window_to_row(data[s:s + seq_len], seq_len)
                for s in starts[i:i + batch_size]]
        yield Batch(ids=np.stack([r[0] for r in rows]),
                    targets=np.stack([r[1] for r in rows]),
                    target_mask=np.stack([r[2] for r in rows]))


def read_manifest(path: str) -> list[str]:
    """One file path per line, UTF-8, '#' comments and blank lines allowed.

    Relative paths resolve against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line if os.path.isabs(line) else os.path.join(base, line))
    return out


def load_files(paths: list[str]) -> bytes:
    blobs = []
    for p in paths:
        with open(p, "rb") as fh:
            blobs.append(fh.read())
    return b"".join(blobs)
