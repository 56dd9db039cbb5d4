"""Token streams: synthetic tasks and file loaders, plus deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VAL_FRACTION = 0.02


def copy_stream(n_tokens: int, seed: int = 0, vocab: int = 256, alphabet: int = 8, segment: int = 4) -> np.ndarray:
    """Random segments from a small alphabet, each immediately repeated once.

    The second copy of every segment is predictable from context, the first is not.
    """
    if alphabet > vocab or alphabet < 2:
        raise ValueError("alphabet must lie in [2, vocab]")
    rng = np.random.default_rng(seed)
    symbols = rng.choice(vocab, size=alphabet, replace=False)
    n_seg = -(-n_tokens // (2 * segment))
    segs = symbols[rng.integers(0, alphabet, size=(n_seg, segment))]
    return np.concatenate([segs, segs], axis=1).ravel()[:n_tokens].astype(np.int64)


def cycle_stream(n_tokens: int, seed: int = 0, vocab: int = 256, period: int = 16) -> np.ndarray:
    """A fixed cycle of ``period`` distinct tokens, so each token determines the next."""
    if not 2 <= period <= vocab:
        raise ValueError("period must lie in [2, vocab]")
    rng = np.random.default_rng(seed)
    cyc = rng.choice(vocab, size=period, replace=False)
    return np.resize(cyc, n_tokens).astype(np.int64)


def load_tokens(path, fmt: str = "bytes") -> np.ndarray:
    """Read a raw byte file (byte = token id) or whitespace-separated integers."""
    if fmt == "bytes":
        return np.fromfile(path, dtype=np.uint8).astype(np.int64)
    if fmt == "ints":
        with open(path) as fh:
            return np.array(fh.read().split(), dtype=np.int64)
    raise ValueError(f"unknown token file format {fmt!r}")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray


def split_stream(tokens, val_fraction: float = VAL_FRACTION) -> Split:
    """Hold out the final ``val_fraction`` of the stream, unshuffled."""
    t = np.asarray(tokens, dtype=np.int64)
    n_val = max(1, int(round(len(t) * val_fraction)))
    if len(t) - n_val < 2:
        raise ValueError("token stream too short to split")
    return Split(t[:-n_val], t[-n_val:])


def sample_batch(stream, batch: int, seq: int, rng: np.random.Generator) -> np.ndarray:
    """``batch`` random windows of ``seq + 1`` tokens."""
    n = len(stream) - seq
    if n < 1:
        raise ValueError(f"stream of {len(stream)} tokens is shorter than a window of {seq + 1}")
    starts = rng.integers(0, n, size=batch)
    return np.stack([stream[s:s + seq + 1] for s in starts])


def eval_windows(stream, seq: int, max_windows: int = 16) -> np.ndarray:
    """Non-overlapping windows from the start of ``stream``; shortens ``seq`` if needed."""
    seq = min(seq, len(stream) - 1)
    if seq < 1:
        raise ValueError("validation split needs at least two tokens")
    n = min(max_windows, (len(stream) - 1) // seq)
    return np.stack([stream[i * seq:i * seq + seq + 1] for i in range(n)])
