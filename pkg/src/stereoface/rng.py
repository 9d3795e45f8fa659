"""Deterministic pseudo-random numbers for every seeded code path.

The generator is SplitMix64: outputs are produced by advancing a counter by
the 64-bit golden-ratio increment 0x9E3779B97F4A7C15 and passing the sum
through the finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

with all arithmetic modulo 2**64. Because the stream is a pure function of
(seed, draw index), batched draws can be vectorized with numpy while staying
bit-identical to the scalar path, and results reproduce across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """Apply the SplitMix64 finalizer to a single 64-bit value."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential SplitMix64 stream seeded by a 64-bit integer."""

    def __init__(self, seed: int):
        self._seed = seed & _MASK
        self._count = 0

    def next_u64(self) -> int:
        """Next raw 64-bit output."""
        self._count += 1
        return mix64(self._seed + self._count * _GAMMA)

    def uniform(self) -> float:
        """Uniform double in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_in(self, lo: float, hi: float) -> float:
        """Uniform double in [lo, hi)."""
        return lo + (hi - lo) * self.uniform()

    def below(self, n: int) -> int:
        """Integer in [0, n) via floor(uniform * n); n must be positive."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        return min(int(self.uniform() * n), n - 1)

    def uniforms(self, n: int) -> np.ndarray:
        """Batch of n uniforms, identical to n successive uniform() calls."""
        if n < 0:
            raise ValueError("negative draw count")
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = np.uint64(self._seed) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """Batch of n standard normals via Box-Muller.

        Draws ceil(n/2) uniform pairs; the cosine half of each pair comes
        first, then the sine half, truncated to n values.
        """
        m = (n + 1) // 2
        u1 = 1.0 - self.uniforms(m)  # (0, 1], keeps log finite
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        return np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order
