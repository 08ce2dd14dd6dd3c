"""Deterministic, hierarchically named random streams.

A stream is identified by ``(seed, stream_id)``. Two streams with the same
identity always produce the same draw sequence, regardless of platform or
process history, because the underlying bit generator is seeded from a
SHA-256 digest of the identity rather than from Python's salted ``hash``.

Workers must never share a stream object; they derive their own child via
``child(name)`` which appends a path component to the stream id.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _digest(seed: int, stream_id: str, salt: str) -> int:
    payload = f"{salt}|{seed}|{stream_id}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """Named random stream; a factory for generators, not a generator itself."""

    seed: int
    stream_id: str = "root"

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_id}/{name}")

    def generator(self) -> np.random.Generator:
        """Fresh numpy generator; calling twice yields identical sequences."""
        return np.random.default_rng(_digest(self.seed, self.stream_id, "np"))

    def torch_seed(self) -> int:
        """64-bit seed for torch generators, decorrelated from the numpy one."""
        return _digest(self.seed, self.stream_id, "torch")
