"""Array core: creation, positionwise ops, matmul, reductions and seeded RNG.

Tensors are plain row-major ``numpy.ndarray`` objects; image batches use
NCHW layout. The helpers here add the shape checks and tie-break rules the
rest of the package relies on, and never broadcast.

Randomness comes from :class:`SeededRng`, a PCG64 generator keyed by a
``numpy.random.SeedSequence`` built from ``(seed, stream, *keys)``. PCG64
and SeedSequence are fixed, documented algorithms, so the same key gives
the same stream on every platform.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class SeededRng:
    """Deterministic PCG64 stream identified by ``(seed, stream)``.

    ``child(*keys)`` derives an independent substream, e.g. one per
    ``(epoch, record)`` so that batch preparation order never changes the
    random draws.
    """

    def __init__(self, seed: int, stream: int = 0, keys: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if stream < 0:
            raise ValueError("stream id must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,) + self.keys)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream, self.keys + tuple(keys))

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self.generator.uniform(lo, hi, size)

    def normal(self, mean=0.0, std=1.0, size=None):
        return self.generator.normal(mean, std, size)

    def integers(self, lo, hi, size=None):
        """Integers in ``[lo, hi)``."""
        return self.generator.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream}, keys={self.keys})"


def _check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def create(shape, fill: Union[float, tuple] = 0.0, rng: Optional[SeededRng] = None,
           dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Create a tensor.

    ``fill`` is a constant, ``("normal", mean, std)`` or
    ``("uniform", lo, hi)``. Random fills need ``rng``.
    """
    shape = _check_shape(shape)
    if isinstance(fill, tuple):
        kind, a, b = fill
        if rng is None:
            raise ValueError("random fill requires an rng")
        if kind == "normal":
            values = rng.normal(a, b, shape)
        elif kind == "uniform":
            values = rng.uniform(a, b, shape)
        else:
            raise ValueError(f"unknown fill distribution {kind!r}")
        return values.astype(dtype)
    return np.full(shape, fill, dtype=dtype)


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Positionwise ``add``, ``sub``, ``mul``, ``scale`` or ``max`` (with a scalar)."""
    a = np.asarray(a)
    if op == "scale":
        return a * np.asarray(b, dtype=a.dtype)
    if op == "max":
        return np.maximum(a, np.asarray(b, dtype=a.dtype))
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return fn(a, b)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def reduce(op: str, a: np.ndarray, axis: Optional[int] = None):
    """``sum``, ``mean``, ``max`` or ``argmax``; argmax ties go to the lowest index."""
    a = np.asarray(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    if op == "sum":
        return a.sum(axis=axis)
    if op == "mean":
        return a.mean(axis=axis)
    if op == "max":
        return a.max(axis=axis)
    if op == "argmax":
        # numpy returns the first occurrence, which is the documented tie rule
        out = np.argmax(a, axis=axis)
        return int(out) if axis is None else out
    raise ValueError(f"unknown reduction {op!r}")


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a
