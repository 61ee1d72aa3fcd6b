"""Seeded, splittable random streams.

Each consumer (masking, init, augmentation, speckle, ...) gets its own child
stream derived from the root seed and a name, so adding a consumer never
perturbs the draws of another. Draws are counter-based: stream state is a
single integer, which makes checkpointing trivial.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Deterministic stream keyed by (seed, path-of-names, counter)."""

    def __init__(self, seed, _key=(), counter=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        self.counter = int(counter)

    def child(self, name):
        """Independent sub-stream; same name always yields the same stream."""
        return Rng(self.seed, self._key + (_name_key(name),))

    def generator(self):
        """Fresh numpy Generator for the next counter value."""
        seq = np.random.SeedSequence(entropy=self.seed,
                                     spawn_key=self._key + (self.counter,))
        self.counter += 1
        return np.random.Generator(np.random.Philox(seq))

    def at(self, counter):
        """Generator for an explicit counter (stateless access, e.g. per step)."""
        seq = np.random.SeedSequence(entropy=self.seed,
                                     spawn_key=self._key + (int(counter),))
        return np.random.Generator(np.random.Philox(seq))

    # checkpointable state ----------------------------------------------------

    def state(self):
        return {"seed": self.seed, "key": list(self._key), "counter": self.counter}

    @classmethod
    def from_state(cls, st):
        return cls(st["seed"], tuple(st["key"]), st["counter"])
