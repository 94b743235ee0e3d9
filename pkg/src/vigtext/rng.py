"""Deterministic random number helpers.

The toy embedders need a PRNG whose stream is pinned by this package,
not by a library version, so reruns stay byte-identical. splitmix64 is
small, well documented, and easy to reimplement in an oracle.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 stream; uniform doubles use the top 53 bits."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return lo + u * (hi - lo)

    def fill(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform(lo, hi)
        return out.reshape(shape)


def seed_from_parts(*parts) -> int:
    """Stable 64-bit seed from a mix of ints, strings and bytes."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bytes):
            h.update(b"b" + p)
        elif isinstance(p, str):
            h.update(b"s" + p.encode("utf-8"))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i" + int(p).to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"unsupported seed part: {type(p)!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")
