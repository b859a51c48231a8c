"""Seeded random streams.

Every random draw in the package goes through this module so that a
``(seed, keys...)`` tuple fully determines the stream:

* key derivation: SplitMix64 folding of the seed and each integer key,
* generator: Philox4x64-10 (counter-based) keyed with ``(derived, 0)``,
  counter starting at zero,
* uniforms: ``(raw >> 11) * 2**-53`` from consecutive 64-bit outputs,
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``, using
  ``r = sqrt(-2 log(1 - u1))`` and emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``.

Nothing here depends on numpy's own sampling algorithms, only on the raw
Philox word stream, so the draws are reproducible from the description above.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Fold integer or string keys into a 64-bit seed."""
    h = splitmix64(int(seed) & MASK64)
    for k in keys:
        if isinstance(k, str):
            for b in k.encode("utf-8"):
                h = splitmix64(h ^ b)
        else:
            h = splitmix64(h ^ (int(k) & MASK64))
    return h


def _raw(seed: int, n: int) -> np.ndarray:
    bitgen = np.random.Philox(key=np.array([int(seed) & MASK64, 0], dtype=np.uint64))
    return bitgen.random_raw(n).astype(np.uint64)


def uniform(seed: int, n: int) -> np.ndarray:
    """``n`` float64 uniforms in [0, 1)."""
    return (_raw(seed, n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def normal(seed: int, n: int) -> np.ndarray:
    """``n`` float64 standard normals."""
    m = (n + 1) // 2
    u = uniform(seed, 2 * m)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log1p(-u1))
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


class Stream:
    """Sequential draws from one derived seed.

    Each call consumes a fresh sub-stream, so the result of a call depends
    only on the seed and how many calls preceded it.
    """

    def __init__(self, seed: int, *keys: int | str):
        self.seed = derive_seed(seed, *keys)
        self.calls = 0

    def _next(self) -> int:
        s = derive_seed(self.seed, self.calls)
        self.calls += 1
        return s

    def uniform(self, size: int | tuple[int, ...] = (), low: float = 0.0, high: float = 1.0):
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = low + (high - low) * uniform(self._next(), n)
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        return normal(self._next(), int(np.prod(shape))).reshape(shape)

    def integers(self, high: int, size: int | tuple[int, ...] = ()):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        out = np.minimum(np.floor(np.asarray(u) * high), high - 1).astype(np.int64)
        return out if np.ndim(out) else int(out)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
