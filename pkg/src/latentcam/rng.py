"""Splittable, counter-based random number generation.

Every stochastic component of the pipeline (initializers, data draws,
noise samples, samplers) pulls from an `Rng` derived from a 64-bit seed
and a slash-separated path string. Child streams are derived by name,
never by drawing, so the set of splits a program performs cannot change
the values any particular stream produces. The underlying generator is
Philox (counter-based), whose state serializes to plain JSON so training
can be interrupted and resumed bit-exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng", "derive_key"]


def derive_key(seed: int, path: str) -> np.ndarray:
    """Map (seed, path) to a 128-bit Philox key, uniformly and stably."""
    digest = hashlib.sha256(f"{seed:#x}|{path}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class Rng:
    """A named stream of random values with serializable state.

    `split(name)` returns an independent child stream addressed by
    `parent_path/name`; the child's values depend only on (seed, path),
    not on anything drawn from the parent.
    """

    def __init__(self, seed: int, path: str = "root"):
        self.seed = int(seed)
        self.path = path
        self._gen = np.random.Generator(np.random.Philox(key=derive_key(self.seed, path)))

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}")

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.float64)
        if scale != 1.0:
            out = out * scale
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice_pair(self, n: int) -> tuple[int, int]:
        """An ordered pair of distinct indices from range(n)."""
        i = int(self._gen.integers(0, n))
        j = int(self._gen.integers(0, n - 1))
        if j >= i:
            j += 1
        return i, j

    # -- state serialization (for exact resume) --

    def state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": self.path,
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], state["path"])
        bg = rng._gen.bit_generator
        st = bg.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        bg.state = st
        return rng

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
