"""Deterministic pseudo-random numbers: xoshiro256** seeded via splitmix64.

One fixed, fully specified generator so that every dataset, weight init and
batch order in the suite is a pure function of integer seeds.  Gaussian
variates come from the Box-Muller transform on the generator's uniforms;
shuffles are Fisher-Yates driven by ``u64() % n``.
"""

from __future__ import annotations

import math

import numpy as np

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / (1 << 53)


def _mix64(z: int) -> int:
    """splitmix64 finalizer: scrambles one 64-bit word."""
    z &= _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (used to derive per-stage,
    per-epoch and per-domain streams from a run seed)."""
    h = 0
    for p in parts:
        h = _mix64((h + _GOLDEN + (p & _M64)) & _M64)
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _M64


class Rng:
    """xoshiro256** stream with splitmix64 state seeding."""

    def __init__(self, seed: int):
        s = seed & _M64
        state = []
        for _ in range(4):
            s = (s + _GOLDEN) & _M64
            state.append(_mix64(s))
        self._s = state
        self._spare_normal = None

    def u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _M64, 7) * 9) & _M64
        t = (s[1] << 17) & _M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1): top 53 bits of the next word."""
        return (self.u64() >> 11) * _INV_2_53

    def uniforms(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.array([self.uniform() for _ in range(n)], dtype=np.float64)
        return out.reshape(shape)

    def normal(self) -> float:
        """Standard normal via Box-Muller; pairs are cached."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so the log is finite
        u1 = ((self.u64() >> 11) + 1) * _INV_2_53
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.array([self.normal() for _ in range(n)], dtype=np.float64)
        if sigma != 1.0:
            out *= sigma
        return out.reshape(shape)

    def randrange(self, n: int) -> int:
        """Integer in [0, n); modulo reduction (bias irrelevant here)."""
        return self.u64() % n

    def shuffle(self, arr) -> None:
        """In-place Fisher-Yates on a list or 1-d array."""
        for i in range(len(arr) - 1, 0, -1):
            j = self.u64() % (i + 1)
            arr[i], arr[j] = arr[j], arr[i]
