"""Deterministic counter-based randomness.

Every draw builds a fresh Philox generator keyed by (seed, stream) with
the draw counter placed in the 256-bit counter block, so a draw's value
depends only on (seed, stream, counter), never on evaluation order or on
what was drawn before it.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Counter-based random stream (Philox 4x64)."""

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        ctr = np.array([0, 0, self.counter & _MASK64, 0], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def child(self, tag: int) -> "Rng":
        """Independent stream derived from this one; deterministic in ``tag``."""
        return Rng(self.seed, _splitmix64(self.stream ^ _splitmix64(tag)), 0)

    def normal(self, shape=(), std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._generator().standard_normal(shape, dtype=dtype)
        if std != 1.0:
            out = out * dtype(std) if callable(dtype) else out * std
        return np.asarray(out, dtype=dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        u = self._generator().random(shape, dtype=dtype)
        return np.asarray(low + (high - low) * u, dtype=dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def choice_weighted(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to non-negative ``weights``."""
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValueError("choice_weighted: weights must sum to a positive finite value")
        u = float(self._generator().random()) * total
        return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, len(w) - 1))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def state(self) -> dict:
        return {
            "algorithm": self.ALGORITHM,
            "seed": self.seed,
            "stream": self.stream,
            "counter": self.counter,
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        if state.get("algorithm") != cls.ALGORITHM:
            raise ValueError(f"unsupported rng algorithm: {state.get('algorithm')!r}")
        return cls(state["seed"], state["stream"], state["counter"])

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream}, counter={self.counter})"
