"""Counter-based, splittable random streams.

A stream is fully identified by (seed, stream_index); the pair keys a Philox
counter-based generator, so identical pairs replay identical draw sequences
regardless of what other streams exist or in which order they are consumed.
Derived streams come from ``split``, which mixes integer or string tags into
a fresh stream index. All streams split from one root share a DrawCounter so
callers can audit how many draws a piece of code consumed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fold_tag(state: int, tag) -> int:
    if isinstance(tag, str):
        # FNV-1a over the utf-8 bytes keeps string tags platform-stable.
        h = 0xCBF29CE484222325
        for b in tag.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        tag = h
    elif isinstance(tag, (int, np.integer)):
        tag = int(tag) & _MASK64
    else:
        raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")
    return _splitmix64(state ^ tag)


class DrawCounter:
    """Tally of draw calls, shared by every stream split from one root."""

    __slots__ = ("normal_calls", "integer_calls", "uniform_calls", "permutation_calls")

    def __init__(self):
        self.normal_calls = 0
        self.integer_calls = 0
        self.uniform_calls = 0
        self.permutation_calls = 0

    def snapshot(self) -> dict:
        return {
            "normal": self.normal_calls,
            "integer": self.integer_calls,
            "uniform": self.uniform_calls,
            "permutation": self.permutation_calls,
        }


class RngStream:
    """One deterministic draw sequence keyed by (seed, stream_index)."""

    __slots__ = ("seed", "stream_index", "counter", "_gen")

    def __init__(self, seed: int, stream_index: int = 0, counter: DrawCounter | None = None):
        self.seed = int(seed) & _MASK64
        self.stream_index = int(stream_index) & _MASK64
        self.counter = counter if counter is not None else DrawCounter()
        self._gen = None  # constructed on first draw; splits stay cheap

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=[self.seed, self.stream_index])
            )
        return self._gen

    def split(self, *tags) -> "RngStream":
        """Derive an independent child stream; tags may be ints or strings."""
        idx = _splitmix64(self.stream_index ^ 0xA5A5A5A5A5A5A5A5)
        for tag in tags:
            idx = _fold_tag(idx, tag)
        return RngStream(self.seed, idx, self.counter)

    def normal(self, shape) -> np.ndarray:
        """I.i.d. standard normal draws, float64."""
        self.counter.normal_calls += 1
        return self.gen.standard_normal(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int) -> int:
        """One uniform integer in the inclusive range [low, high]."""
        self.counter.integer_calls += 1
        return int(self.gen.integers(low, high + 1))

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws on [0, 1), float64."""
        self.counter.uniform_calls += 1
        return self.gen.random(size=shape, dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """A uniform random permutation of range(n)."""
        self.counter.permutation_calls += 1
        return self.gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        self.counter.permutation_calls += 1
        return self.gen.permutation(n)[:k]

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_index={self.stream_index})"
