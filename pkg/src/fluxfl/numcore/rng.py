"""SplitMix64 random streams.

Every random draw in the simulator comes from one of these streams so that
runs are reproducible bit-for-bit and independent of worker scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB
_TWO_POW_M53 = 2.0**-53


def mix64(z: int) -> int:
    """SplitMix64 output finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def _part_to_int(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "little")
    return int(part) & MASK64


def hash_parts(*parts: int | str) -> int:
    h = 0
    for part in parts:
        h = mix64(h ^ mix64(_part_to_int(part) + GOLDEN_GAMMA))
    return h


def derive_seed(master: int, *parts: int | str) -> int:
    """Seed of a sub-stream: ``master XOR hash(parts)``.

    Used as ``derive_seed(seed, "train", client_id, round)`` so a client's
    stream never depends on which other clients happened to run.
    """
    return (int(master) ^ hash_parts(*parts)) & MASK64


class RngStream:
    """A SplitMix64 generator.

    Uniform reals use the top 53 bits of each output, so they lie in
    ``[0, 1)`` and never round up to 1.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & MASK64

    @classmethod
    def derived(cls, master: int, *parts: int | str) -> RngStream:
        return cls(derive_seed(master, *parts))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def next_u64s(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array (same values as ``n`` scalar calls)."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
            states = steps + np.uint64(self.state)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return _mix64_array(states)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _TWO_POW_M53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.next_u64s(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def open_uniforms(self, n: int) -> np.ndarray:
        """Uniforms strictly inside (0, 1), safe for logarithms."""
        return ((self.next_u64s(n) >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_POW_M53

    def normals(self, n: int) -> np.ndarray:
        # Box-Muller on pairs of open uniforms.
        m = (n + 1) // 2
        u = self.open_uniforms(2 * m).reshape(m, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty(2 * m)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        if high <= 0:
            raise ValueError("high must be positive")
        return (self.next_u64s(n) % np.uint64(high)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64s(n), kind="stable")

    def choice(self, population: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(population)``, in draw order."""
        if size > population:
            raise ValueError(f"cannot choose {size} of {population}")
        return self.permutation(population)[:size]


def splitmix64_next(rng: RngStream) -> int:
    return rng.next_u64()
