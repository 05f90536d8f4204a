"""Counter-based pseudo-random generator used for every random choice.

All randomness in the package (dataset synthesis, parameter init, mask
sampling, shuffles) flows through this generator rather than the platform
default, so a run is reproducible bit-for-bit from its seed and the
generator can be re-implemented exactly from this file.

Definition. Output i (0-based) of a stream with 64-bit seed s is

    u64(i) = mix64((s + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64)

where mix64 is the SplitMix64 finalizer:

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9  (mod 2^64)
    z ^= z >> 27;  z *= 0x94D049BB133111EB  (mod 2^64)
    z ^= z >> 31

Derived quantities are built only from u64 outputs, IEEE-754 doubles, and
the formulas documented on each method.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_CHILD_SALT = 0xD1B54A32D192ED03

_TWO53 = float(1 << 53)


def _mix64(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX_A) & _MASK64
    z ^= z >> 27
    z = (z * _MIX_B) & _MASK64
    z ^= z >> 31
    return z


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX_A)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX_B)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """One deterministic stream. Not thread-safe; one owner per stream."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._count = 0

    def __repr__(self):
        return f"Rng(seed={self.seed:#x}, count={self._count})"

    def child(self, tag: int) -> "Rng":
        """Independent stream derived from (seed, tag); does not advance self."""
        return Rng(_mix64(self.seed ^ _mix64((tag & _MASK64) ^ _CHILD_SALT)))

    def u64(self) -> int:
        self._count += 1
        return _mix64((self.seed + self._count * _GAMMA) & _MASK64)

    def _u64_block(self, count: int) -> np.ndarray:
        start = self._count + 1
        self._count += count
        idx = np.arange(start, start + count, dtype=np.uint64)
        return _mix64_array(np.uint64(self.seed) + idx * np.uint64(_GAMMA))

    def uniform(self) -> float:
        """Double in [0, 1): top 53 bits of u64 scaled by 2^-53."""
        return (self.u64() >> 11) / _TWO53

    def integer(self, n: int) -> int:
        """Integer in [0, n) as floor(uniform() * n).

        Bias is below 2^-53 * n, negligible for the desk-scale n used here.
        """
        if n <= 0:
            raise ValueError(f"integer() needs n >= 1, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes exactly two u64 outputs.

        u1 = (u64 >> 11 + 1) / (2^53 + 1) in (0, 1), u2 = uniform(), and
        z = sqrt(-2 ln u1) * cos(2 pi u2).
        """
        u1 = ((self.u64() >> 11) + 1) / (_TWO53 + 1.0)
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape) -> np.ndarray:
        """Array of standard normals.

        Consumes 2*ceil(m/2) u64 outputs for m values; pair j uses outputs
        (2j, 2j+1) as (u1, u2) and yields (cos, sin) Box-Muller values, so
        the stream position after this call is independent of shape details
        beyond the total count.
        """
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not np.isscalar(shape) else (int(shape),)
        m = int(np.prod(shape)) if shape else 1
        pairs = (m + 1) // 2
        block = self._u64_block(2 * pairs)
        u1 = ((block[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) / (_TWO53 + 1.0)
        u2 = (block[1::2] >> np.uint64(11)).astype(np.float64) / _TWO53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:m].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates over [0, n), swapping from the back."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct integers from [0, n), sorted ascending."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.integer(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        picked = pool[:k]
        picked.sort()
        return picked

    def shuffle(self, items: np.ndarray) -> None:
        """In-place Fisher-Yates, same swap order as permutation()."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]
