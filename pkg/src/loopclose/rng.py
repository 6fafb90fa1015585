"""Portable 64-bit linear congruential generator.

Every random draw that ends up in a dataset or in the BRIEF sampling pattern
goes through this generator so outputs are byte-identical on any platform.
"""

import math

import numpy as np

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
_MASK = (1 << 64) - 1


class Lcg64:
    """state <- state * 6364136223846793005 + 1442695040888963407 (mod 2**64)."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK
        # decorrelate small seeds
        self.next_u64()

    def next_u64(self):
        self.state = (self.state * MULTIPLIER + INCREMENT) & _MASK
        # low bits of a power-of-two LCG are weak; mix the high half down
        x = self.state
        x ^= x >> 29
        x = (x * 0xBF58476D1CE4E5B9) & _MASK
        x ^= x >> 32
        return x

    def uniform(self):
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n):
        """Integer in [0, n)."""
        return int(self.uniform() * n)

    def normal(self):
        # Box-Muller, cosine branch only: one draw per call keeps the stream simple
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randbytes(self, n):
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "little")
        return bytes(out[:n])

    def descriptor(self):
        return np.frombuffer(self.randbytes(32), dtype=np.uint8).copy()

    def fork(self, salt):
        """Independent child stream derived from the current state and ``salt``."""
        return Lcg64(self.next_u64() ^ (int(salt) * 0x9E3779B97F4A7C15 & _MASK))
