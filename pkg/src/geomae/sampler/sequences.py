"""Four-date sequences with one-to-six-month gaps between consecutive scenes."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .records import MAX_GAP_MONTHS, MIN_GAP_MONTHS, SEQUENCE_LENGTH, month_index

TRAIN_CAP = 1500
VAL_CAP = 250
_ENUMERATION_LIMIT = 2_000_000


def _successor_ranges(months: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For sorted months, successors of scene i are the index range [lo[i], hi[i])."""
    lo = np.searchsorted(months, months + MIN_GAP_MONTHS, side="left")
    hi = np.searchsorted(months, months + MAX_GAP_MONTHS, side="right")
    return lo, hi


def count_sequences(months: np.ndarray, length: int = SEQUENCE_LENGTH) -> int:
    lo, hi = _successor_ranges(months)
    ways = np.ones(len(months), dtype=object)  # python ints, no overflow
    for _ in range(length - 1):
        csum = np.concatenate([[0], np.cumsum(ways)])
        ways = csum[hi] - csum[lo]
    return int(sum(ways))


def enumerate_sequences(months: np.ndarray, length: int = SEQUENCE_LENGTH) -> np.ndarray:
    """All valid index sequences ``[n, length]`` in lexicographic order."""
    lo, hi = _successor_ranges(months)
    seqs = np.arange(len(months), dtype=np.int64)[:, None]
    for _ in range(length - 1):
        last = seqs[:, -1]
        counts = hi[last] - lo[last]
        total = int(counts.sum())
        rep = np.repeat(seqs, counts, axis=0)
        starts = np.repeat(np.cumsum(counts) - counts, counts)
        nxt = np.repeat(lo[last], counts) + (np.arange(total) - starts)
        seqs = np.concatenate([rep, nxt[:, None]], axis=1)
    return seqs


def _sample_sequences_dp(months: np.ndarray, rng: np.random.Generator, cap: int, length: int) -> np.ndarray:
    """Uniform draws without replacement for candidate sets too large to list."""
    lo, hi = _successor_ranges(months)
    n = len(months)
    # ways[k][i]: number of valid continuations of length k+1 starting at i
    ways = [np.ones(n)]
    for _ in range(length - 1):
        csum = np.concatenate([[0.0], np.cumsum(ways[-1])])
        ways.append(csum[hi] - csum[lo])
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < cap:
        w = ways[length - 1]
        i = int(rng.choice(n, p=w / w.sum()))
        seq = [i]
        for k in range(length - 2, -1, -1):
            nxt = np.arange(lo[seq[-1]], hi[seq[-1]])
            p = ways[k][nxt]
            seq.append(int(nxt[rng.choice(len(nxt), p=p / p.sum())]))
        key = tuple(seq)
        if key not in seen:
            seen.add(key)
            out.append(key)
    return np.array(out, dtype=np.int64).reshape(-1, length)


def build_sequences(
    dates: Sequence[tuple[int, int]], rng: np.random.Generator, cap: int = TRAIN_CAP, length: int = SEQUENCE_LENGTH
) -> np.ndarray:
    """Random valid sequences (as indices into the date-sorted ``dates``).

    Candidates are visited in uniformly random order until all are used or
    ``cap`` sequences are collected. Returns ``[n, length]`` int array.
    """
    months = np.array([month_index(y, d) for y, d in dates], dtype=np.int64)
    if len(months) < length:
        return np.zeros((0, length), dtype=np.int64)
    if np.any(np.diff(months) < 0):
        raise ValueError("scenes must be sorted by date")
    total = count_sequences(months, length)
    if total == 0:
        return np.zeros((0, length), dtype=np.int64)
    if total > _ENUMERATION_LIMIT and cap < total:
        return _sample_sequences_dp(months, rng, cap, length)
    seqs = enumerate_sequences(months, length)
    order = rng.permutation(len(seqs))[:cap]
    return seqs[order]
