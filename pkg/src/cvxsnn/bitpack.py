"""Bit-packed binary columns (64 rows per little-endian word)."""

from __future__ import annotations

import numpy as np


def n_words(n_rows: int) -> int:
    return (n_rows + 63) // 64


def pack_columns(B: np.ndarray) -> np.ndarray:
    """Pack a binary ``(rows, P)`` matrix into a ``(P, words)`` uint64 array.

    Bit ``r % 64`` of word ``r // 64`` holds row ``r``; padding bits are zero.
    """
    B = np.asarray(B).astype(bool)
    rows, P = B.shape
    W = n_words(rows)
    padded = np.zeros((P, W * 64), dtype=bool)
    padded[:, :rows] = B.T
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").reshape(P, W).astype(np.uint64)


def unpack_columns(words: np.ndarray, n_rows: int) -> np.ndarray:
    """Inverse of :func:`pack_columns`; returns a bool ``(rows, P)`` matrix."""
    words = np.ascontiguousarray(words, dtype="<u8")
    P = words.shape[0]
    bits = np.unpackbits(words.view(np.uint8).reshape(P, -1), axis=1, bitorder="little")
    return bits[:, :n_rows].T.astype(bool)


def unique_columns(words: np.ndarray):
    """Indices of the first occurrence of every distinct packed column.

    Returns ``(keep, inverse)``: ``keep`` is sorted ascending, and
    ``inverse[j]`` is the position in ``keep`` of column ``j``'s representative.
    """
    words = np.ascontiguousarray(words, dtype=np.uint64)
    if words.shape[0] == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    keys = words.view(np.dtype((np.void, words.dtype.itemsize * words.shape[1]))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    keep = first[order]
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return keep, rank[inverse.ravel()]


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(words, dtype=np.uint64))


def column_counts(words: np.ndarray) -> np.ndarray:
    """Number of ones per packed column."""
    return popcount(words).sum(axis=1, dtype=np.int64)


def packed_rmatvec_binary(words: np.ndarray, mask_words: np.ndarray) -> np.ndarray:
    """``D^T v`` for a binary row vector ``v`` given in packed form."""
    return popcount(words & mask_words[None, :]).sum(axis=1, dtype=np.int64)


def binary_gram(words: np.ndarray) -> np.ndarray:
    """``D^T D`` for a binary dictionary via AND + popcount, in column blocks."""
    P, W = words.shape
    block = max(1, (1 << 22) // max(1, P * W))
    G = np.empty((P, P), dtype=np.int64)
    for a in range(0, P, block):
        wa = words[a:a + block]
        G[a:a + block] = popcount(wa[:, None, :] & words[None, :, :]).sum(axis=2)
    return G
