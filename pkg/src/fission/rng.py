"""Reproducible random number streams.

Streams are counter-based (Philox) and keyed by (seed, stream_id), so a
simulation can hand stream i to trial i and get the same draws no matter
how trials are scheduled across threads. A stream is single-owner mutable
state: never share one stream between concurrent tasks.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

_MASK64 = (1 << 64) - 1


class RngStream:
    """One reproducible draw sequence, addressed by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0):
        if not 0 <= int(seed) <= _MASK64 or not 0 <= int(stream_id) <= _MASK64:
            raise DomainError("seed and stream_id must fit in 64 bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self.gen = np.random.Generator(bitgen)

    def substream(self, stream_id: int) -> "RngStream":
        """Fresh stream with the same seed and a different stream id."""
        return RngStream(self.seed, stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
