"""Counter-based random number streams.

Each trajectory (or chain) draws from its own stream, addressed by
(seed, stream, counter). Draws are pure functions of that triple, so results
are bit-for-bit reproducible no matter how work is batched or scheduled.
The generator is a SplitMix64-style mixer applied to the combined key.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / float(1 << 53)


def _mix(z):
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN).astype(np.uint64)
        z ^= z >> np.uint64(30)
        z = z * _MIX1
        z ^= z >> np.uint64(27)
        z = z * _MIX2
        z ^= z >> np.uint64(31)
    return z


def _hash_label(label: str) -> int:
    h = np.uint64(1469598103934665603)
    for b in label.encode():
        h = np.uint64((int(h) ^ b) * 1099511628211 % (1 << 64))
    return int(h)


class CounterRng:
    """Stateless counter-addressed RNG with independent streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._base = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))

    def derive(self, label: str) -> "CounterRng":
        """Independent generator for a named sub-purpose."""
        return CounterRng(int(_mix(self._base ^ np.uint64(_hash_label(label)))))

    def _words(self, stream, counter):
        s = _mix(self._base ^ _mix(np.asarray(stream, dtype=np.uint64)))
        return _mix(s ^ _mix(np.asarray(counter, dtype=np.uint64)))

    def uniform(self, stream, counter):
        """U(0,1) variates, elementwise over broadcast (stream, counter)."""
        w = self._words(stream, counter)
        u = (w >> np.uint64(11)).astype(np.float64) * _U53
        # keep strictly inside (0,1) so log/ndtri stay finite
        return np.clip(u, _U53, 1.0 - _U53)

    def exponential(self, stream, counter):
        return -np.log1p(-self.uniform(stream, counter))

    def normal(self, stream, counter):
        return ndtri(self.uniform(stream, counter))


class StreamDraw:
    """Sequential cursor over one stream, for scalar simulation loops."""

    def __init__(self, rng: CounterRng, stream: int, counter: int = 0):
        self.rng = rng
        self.stream = int(stream)
        self.counter = int(counter)

    def _next(self):
        c = self.counter
        self.counter += 1
        return c

    def uniform(self) -> float:
        return float(self.rng.uniform(self.stream, self._next()))

    def exponential(self) -> float:
        return float(self.rng.exponential(self.stream, self._next()))

    def normal(self) -> float:
        return float(self.rng.normal(self.stream, self._next()))
