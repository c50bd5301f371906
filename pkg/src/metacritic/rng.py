"""Seed derivation.

All randomness in a run comes from one integer seed. Independent streams
are obtained by hashing ``(seed, *stream_key)`` through
:class:`numpy.random.SeedSequence` and feeding the result to the
counter-based Philox bit generator, so a stream never depends on how much
any other stream has been consumed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError("stream keys must be non-negative")
    return value


def derive_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for the stream named by ``stream`` under ``seed``."""
    entropy = [_word(seed)] + [_word(p) for p in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
