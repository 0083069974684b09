"""Portable, seedable random number generation.

Every stochastic choice in this package (weight init, synthetic data,
episode sampling) flows through :class:`PortableRng`, a SplitMix64
generator.  SplitMix64 is a tiny, fully specified algorithm (Steele,
Lea & Flood 2014): the state advances by a fixed odd constant and each
output is a finalizer-mixed copy of the state.  Because the update is
a plain 64-bit addition, the k-th output after seeding is a closed-form
function of the seed, which lets us fill large arrays without a Python
loop while producing the exact same stream as repeated scalar calls.

Streams are therefore bit-identical across platforms, Python versions
and numpy versions.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(base_seed: int, name: str) -> int:
    """Per-component seed: FNV-1a hash of the component name XOR the base seed.

    A single user-facing seed reproduces an entire experiment while the
    named components (init, episode streams, evaluation tasks, ...) still
    get statistically independent streams.
    """
    return (fnv1a64(name.encode("utf-8")) ^ base_seed) & _MASK64


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class PortableRng:
    """SplitMix64 generator with scalar and vectorized draws.

    The vectorized fills consume exactly one 64-bit output per element
    (two per normal pair), so mixing scalar and array calls keeps the
    stream well defined.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def _next_u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK64
        return _mix_array(states)

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return int(self.random() * n)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct integers from range(n), by partial Fisher-Yates."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def fill_uniform(self, shape) -> np.ndarray:
        """Array of uniforms in [0, 1), one stream draw per element."""
        n = int(np.prod(shape)) if np.ndim(shape) or isinstance(shape, tuple) else int(shape)
        bits = self._next_u64_array(n)
        return ((bits >> np.uint64(11)) * 2.0**-53).reshape(shape)

    def fill_uniform_signed(self, shape, bound: float) -> np.ndarray:
        """Array of uniforms in [-bound, bound)."""
        return (self.fill_uniform(shape) * 2.0 - 1.0) * bound

    def fill_normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        """Standard-normal array via Box-Muller, two draws per pair."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        bits1 = self._next_u64_array(m)
        bits2 = self._next_u64_array(m)
        u1 = ((bits1 >> np.uint64(11)) + np.uint64(1)) * 2.0**-53  # (0, 1]
        u2 = (bits2 >> np.uint64(11)) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return (sigma * z[:n]).reshape(shape)

    def spawn(self, name: str) -> "PortableRng":
        """Independent child stream keyed by name and the current state."""
        return PortableRng(derive_seed(self.next_u64(), name))
