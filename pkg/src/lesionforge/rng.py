"""Deterministic, splittable random streams.

Every random draw in the package goes through an :class:`RngState`: a root
seed plus a path of names identifying the consumer ("init", "mask",
"epoch3.shuffle", ...). The (seed, path) pair is hashed into a Philox
counter-based generator key, so streams are independent of each other and of
call order: adding a new consumer never shifts the draws of an existing one,
and rebuilding the same state always replays the identical stream on every
platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngState:
    """Root seed plus a derivation path naming one random stream."""

    seed: int
    path: tuple[str, ...] = ()

    def child(self, *names: str) -> "RngState":
        """Derive a sub-stream; `child("a", "b")` == `child("a").child("b")`."""
        return RngState(self.seed, self.path + tuple(str(n) for n in names))

    def _key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(int(self.seed).to_bytes(8, "little", signed=False))
        for name in self.path:
            h.update(b"/")
            h.update(name.encode("utf-8"))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        """A fresh generator for this stream, always starting at the origin.

        Two calls on the same state return generators that replay the same
        sequence; derive a child per use-site when distinct draws are needed.
        """
        return np.random.Generator(np.random.Philox(key=self._key()))

    # Convenience draws; each consumes a fresh generator for this stream.
    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, std, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
