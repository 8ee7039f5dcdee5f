"""Seeded, named random streams.

Each stream is a Philox counter-based generator keyed by a hash of
``(seed, stream name)``, so drawing from one stream never shifts another and
results do not depend on the order streams are first touched.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("init", "dropout", "shuffle", "data")


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def make_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


class Streams:
    """Lazily created generators, one per stream name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = make_stream(self.seed, name)
        return self._gens[name]

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator for ``name`` starting at counter zero."""
        return make_stream(self.seed, name)


_default = Streams(0)


def set_seed(seed: int) -> Streams:
    """Reset the process-wide streams; returns them for explicit use."""
    global _default
    _default = Streams(seed)
    return _default


def streams() -> Streams:
    return _default
