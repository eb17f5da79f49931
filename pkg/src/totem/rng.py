"""Portable, integer-only pseudo random numbers.

xoshiro256** run as ``lanes`` independent streams in lock-step, each lane
seeded from consecutive splitmix64 outputs. Words are emitted lane-major per
step (step 0 lanes 0..L-1, then step 1, ...), so a stream is fully defined by
(seed, lanes). No transcendental functions are used: uniforms are 53-bit
fractions and "normal" samples are scaled Irwin-Hall sums of four 16-bit
uniforms (unit variance up to 2**-32), which keeps every platform bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_SQRT3_OVER_2P16 = 3.0**0.5 / 65536.0
_IH_CENTER = 131070  # 4 * 32767.5


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _splitmix64_block(seed: int, n: int) -> np.ndarray:
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + k * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, purpose: str | int) -> int:
    """Stable 64-bit sub-seed for (seed, purpose)."""
    digest = hashlib.sha256(f"{int(seed) & MASK64}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """Lane-parallel xoshiro256** generator."""

    def __init__(self, seed: int, lanes: int = 4096):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.seed = int(seed) & MASK64
        self.lanes = lanes
        words = _splitmix64_block(self.seed, 4 * lanes).reshape(lanes, 4)
        self._s = [words[:, i].copy() for i in range(4)]
        # an all-zero lane would be stuck; splitmix64 never yields four zeros in practice
        self._buf = np.empty(0, dtype=np.uint64)

    def spawn(self, purpose: str | int, lanes: int | None = None) -> "Rng":
        return Rng(derive_seed(self.seed, purpose), self.lanes if lanes is None else lanes)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return out

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        have = self._buf.size
        if have < n:
            steps = -(-(n - have) // self.lanes)
            fresh = np.empty(steps * self.lanes, dtype=np.uint64)
            for i in range(steps):
                fresh[i * self.lanes:(i + 1) * self.lanes] = self._step()
            self._buf = np.concatenate([self._buf, fresh])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Unit-variance, zero-mean, bell-shaped samples (support +-3.46)."""
        w = self.next_u64(n)
        m = np.uint64(0xFFFF)
        s = (w & m) + ((w >> np.uint64(16)) & m) + ((w >> np.uint64(32)) & m) + (w >> np.uint64(48))
        return (s.astype(np.float64) - _IH_CENTER) * _SQRT3_OVER_2P16

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """Integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        return low + np.floor(self.uniform(n) * span).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def unit_vector(self, dim: int) -> np.ndarray:
        v = self.normal(dim)
        return v / np.sqrt(v @ v)
