"""Counter-based random number generation with named, order-independent streams.

Each stream is a pure function of (key, counter): draw k of stream s is the
same number no matter when or on which execution unit it is computed, which
is what makes sequential and parallel executions bit-identical.  The mixing
function is the SplitMix64 finalizer applied to ``key + counter * GOLDEN``.

Stream keys are derived from the run seed plus a stream label through
BLAKE2b, so adding or removing one stream never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 53-bit mantissa scaling for uniform doubles in [0, 1)
_INV53 = 1.0 / (1 << 53)


def derive_key(seed: int, label: str) -> int:
    """Derive a 64-bit stream key from the run seed and a stream label."""
    h = hashlib.blake2b(f"{seed:#x}:{label}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _mix(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


class CounterRng:
    """Stateful view over a counter-based stream.

    State is exactly (key, counter); snapshotting a model only needs those
    two integers to reproduce every future draw.
    """

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key & _MASK64
        self.counter = counter

    @classmethod
    def for_stream(cls, seed: int, label: str) -> "CounterRng":
        return cls(derive_key(seed, label))

    def state(self) -> tuple[int, int]:
        return (self.key, self.counter)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "CounterRng":
        return cls(state[0], state[1])

    def next_u64(self) -> int:
        value = _mix(self.key + self.counter * _GOLDEN)
        self.counter += 1
        return value

    def random(self) -> float:
        """One uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV53

    def random_block(self, n: int) -> np.ndarray:
        """n uniform doubles in [0, 1), consuming n counter values.

        Vectorized over the counter range; bit-identical to calling
        :meth:`random` n times.
        """
        if n == 0:
            return np.empty(0, dtype=np.float64)
        counters = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = np.uint64(self.key) + counters * np.uint64(_GOLDEN)
            x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
            x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
            x = x ^ (x >> np.uint64(31))
        return (x >> np.uint64(11)).astype(np.float64) * _INV53

    def randint(self, n: int) -> int:
        """One integer uniform on [0, n) by rejection-free modular draw.

        The modulo bias is below 2**-40 for any n this package uses
        (population sizes), which is irrelevant next to model noise.
        """
        return self.next_u64() % n
