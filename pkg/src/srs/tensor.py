"""Dense tensor primitives and seeded random number generation.

Tensors are plain contiguous row-major numpy arrays, float32 by default
(float64 is reserved for gradient-check tooling). There are no strided
views and no implicit broadcasting: shape mismatches raise instead of
silently broadcasting.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidAxis, ShapeMismatch

DEFAULT_DTYPE = np.float32


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    """Return a tensor with ``new_shape`` and the same element sequence.

    The element count must be preserved exactly; -1 placeholders are not
    supported.
    """
    new_shape = tuple(int(d) for d in new_shape)
    if any(d <= 0 for d in new_shape):
        raise ShapeMismatch(f"non-positive dimension in {new_shape}")
    if int(np.prod(new_shape)) != t.size:
        raise ShapeMismatch(
            f"cannot reshape {t.shape} ({t.size} elements) to {new_shape} "
            f"({int(np.prod(new_shape))} elements)"
        )
    return np.ascontiguousarray(t).reshape(new_shape)


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise_binary(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Elementwise add/sub/mul of two equal-shape tensors. No broadcasting."""
    if op not in _BINARY_OPS:
        raise ValueError(f"unknown op {op!r}, expected one of {sorted(_BINARY_OPS)}")
    if a.shape != b.shape:
        raise ShapeMismatch(f"operand shapes differ: {a.shape} vs {b.shape}")
    return _BINARY_OPS[op](a, b)


def reduce_mean(t: np.ndarray, axes: Iterable[int]) -> np.ndarray:
    """Mean over the named axes; reduced axes become size 1.

    An empty axis set is the identity.
    """
    axes = tuple(sorted(set(int(a) for a in axes)))
    if not axes:
        return t.copy()
    for a in axes:
        if a < 0 or a >= t.ndim:
            raise InvalidAxis(f"axis {a} invalid for shape {t.shape}")
    return t.mean(axis=axes, keepdims=True)


class Rng:
    """Counter-based seeded generator (Philox) with serializable state.

    Identical seeds produce identical draw sequences across runs and
    platforms.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape: Sequence[int], std: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        if not std > 0:
            raise ValueError(f"std must be positive, got {std}")
        draw = self._gen.standard_normal(size=tuple(shape), dtype=np.float64)
        return (draw * float(std)).astype(dtype)

    def uniform(self, low: float, high: float, shape: Sequence[int] = ()) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        raw = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(x) for x in raw["state"]["counter"]],
            "key": [int(x) for x in raw["state"]["key"]],
            "buffer": [int(x) for x in raw["buffer"]],
            "buffer_pos": int(raw["buffer_pos"]),
            "has_uint32": int(raw["has_uint32"]),
            "uinteger": int(raw["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        raw = rng._gen.bit_generator.state
        raw["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        raw["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        raw["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        raw["buffer_pos"] = state["buffer_pos"]
        raw["has_uint32"] = state["has_uint32"]
        raw["uinteger"] = state["uinteger"]
        rng._gen.bit_generator.state = raw
        return rng


def rng_normal(rng: Rng, shape: Sequence[int], std: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """I.i.d. zero-mean normal draws, deterministic under a fixed seed."""
    return rng.normal(shape, std, dtype=dtype)
