"""Deterministic random numbers: xoshiro256++ with named stream splitting.

Every stream is identified by ``(seed, stream)`` where ``stream`` is a
slash-separated path such as ``"init/text.base.0.wq"``.  The four state words
are the first four outputs of SplitMix64 seeded with
``seed XOR fnv1a64(stream)``.  Deriving a child (``spawn``) depends only on the
root seed and the path, never on how much of the parent was consumed.

Conversions:

* uniform double: ``(x >> 11) * 2**-53``, in ``[0, 1)``
* bounded integer: Lemire multiply-shift with rejection (unbiased)
* normal: Box-Muller over consecutive uniform pairs ``(u1, u2)``;
  ``z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``, one normal per pair
"""
from __future__ import annotations

import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def xoshiro_next(s: list[int]) -> int:
    """Reference scalar xoshiro256++ step; mutates ``s`` in place."""
    result = (_rotl((s[0] + s[3]) & MASK64, 23) + s[0]) & MASK64
    t = (s[1] << 17) & MASK64
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    sh17 = np.uint64(17)
    sh23 = np.uint64(23)
    sh41 = np.uint64(41)
    sh45 = np.uint64(45)
    sh19 = np.uint64(19)
    for i in range(out.shape[0]):
        a = s0 + s3
        out[i] = ((a << sh23) | (a >> sh41)) + s0
        t = s1 << sh17
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << sh45) | (s3 >> sh19)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


class Rng:
    """A named xoshiro256++ stream.

    >>> Rng(42).spawn("init").random(2).shape
    (2,)
    """

    def __init__(self, seed: int, stream: str = ""):
        if seed < 0 or seed > MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.stream = stream
        sm = (self.seed ^ fnv1a64(stream)) & MASK64
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    def spawn(self, name: str) -> "Rng":
        path = f"{self.stream}/{name}" if self.stream else name
        return Rng(self.seed, path)

    def state(self) -> list[int]:
        return [int(w) for w in self._state]

    def next_u64(self) -> int:
        s = self.state()
        out = xoshiro_next(s)
        self._state[:] = np.array(s, dtype=np.uint64)
        return out

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self._state, out)
        return out

    def random(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        u = self.random(2 * n)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return (std * z).reshape(shape)

    def below(self, n: int) -> int:
        """Unbiased integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 64) - n) % n
        while True:
            m = self.next_u64() * n
            if (m & MASK64) >= threshold:
                return m >> 64

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates, swapping from the back."""
        items = list(range(n))
        self.shuffle(items)
        return items

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
