"""Counter-based random streams.

A stream is a Philox generator keyed by ``(seed, stream_id)`` through
``SeedSequence``; draws depend only on that pair and on how many numbers
were consumed, never on thread scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RNGStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream id must be nonnegative")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, k: int) -> "RNGStream":
        """Stream ``k`` below this one (used for per-replica, per-chain splits)."""
        return RNGStream(self.seed, self.stream_id * 1_000_003 + 1 + int(k))


def generator(seed: int, stream_id: int = 0) -> np.random.Generator:
    return RNGStream(seed, stream_id).generator()


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RNGStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return generator(int(rng))
    raise TypeError(f"cannot make a generator from {rng!r}")
