"""Seeded random streams that any language can reproduce bit-for-bit.

Algorithm
---------
* Seeding: a 64-bit seed ``s`` drives splitmix64::

      s += 0x9E3779B97F4A7C15
      z = s
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
      z = (z ^ (z >> 27)) * 0x94D049BB133111EB
      out = z ^ (z >> 31)

  and its first four outputs become the xoshiro256** state ``s0..s3``.
* Each draw is xoshiro256**::

      result = rotl(s1 * 5, 7) * 9
      t = s1 << 17
      s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
      s2 ^= t;  s3 = rotl(s3, 45)

  (all arithmetic modulo 2**64).
* ``uniform``: ``(result >> 11) * 2**-53`` in [0, 1).
* ``normal``: Box-Muller over consecutive uniform pairs (u1, u2):
  ``r = sqrt(-2 ln(1 - u1))``, outputs ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``; an odd request discards the final sine.
* ``integers(n)``: ``floor(uniform * n)``.
* ``permutation(n)``: Fisher-Yates from the top, ``j = integers(i + 1)``
  for ``i = n-1 .. 1``.
* ``child(seed, k)``: the first splitmix64 output of
  ``seed + (k + 1) * 0x9E3779B97F4A7C15``; used to derive independent
  per-draw streams from a master seed.
"""

from __future__ import annotations

import numba
import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + GOLDEN) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def child_seed(seed: int, k: int) -> int:
    return splitmix64((seed + (k + 1) * GOLDEN) & MASK)[1]


@numba.njit(cache=True)
def _fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        r = s1 * numba.uint64(5)
        r = (r << numba.uint64(7)) | (r >> numba.uint64(57))
        out[i] = r * numba.uint64(9)
        t = s1 << numba.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << numba.uint64(45)) | (s3 >> numba.uint64(19))
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Rng:
    """xoshiro256** stream seeded through splitmix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    def raw(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill(self._state, out)
        return out

    def uniform(self, size=None, low=0.0, high=1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, mean=0.0, std=1.0):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = (self.raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = mean + std * z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, n: int, size=None):
        u = self.uniform(size)
        return (np.floor(u * n).astype(np.int64)) if size is not None else int(u * n)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, k: int) -> "Rng":
        return Rng(child_seed(self.seed, k))
