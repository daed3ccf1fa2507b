"""Minimal dense numeric core.

Tensors are plain row-major :class:`numpy.ndarray` objects restricted to
``float32`` / ``float64``.  Every matrix product in the package goes through
:func:`matmul` or :func:`bmm`, which lets :func:`count_macs` observe the exact
multiply-accumulate work a kernel performs.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from collections.abc import Iterator

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes or dtypes are inconsistent."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def resolve_dtype(dtype: str | np.dtype | type) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dt}; expected f32 or f64")
    return dt


def tensor(data, dtype: str = "f32") -> np.ndarray:
    """Build a contiguous tensor, checking that every extent is >= 1."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=resolve_dtype(dtype)))
    if arr.ndim == 0 or min(arr.shape) < 1:
        raise ShapeError(f"tensor extents must all be >= 1, got {arr.shape}")
    return arr


def rng(seed: int) -> np.random.Generator:
    """Deterministic generator: PCG64 seeded with a 64-bit integer.

    numpy guarantees the PCG64 bit stream is identical across platforms
    for a given seed.
    """
    return np.random.Generator(np.random.PCG64(seed & 0xFFFF_FFFF_FFFF_FFFF))


def randn(gen: np.random.Generator, shape, dtype: str = "f32", scale: float = 1.0) -> np.ndarray:
    # Always sample in f64 so f32 and f64 draws agree up to rounding.
    return (gen.standard_normal(shape) * scale).astype(resolve_dtype(dtype))


# --------------------------------------------------------------------------
# MAC accounting


class _Counters(threading.local):
    def __init__(self) -> None:
        self.stack: list[Counter] = []


_counters = _Counters()


@contextlib.contextmanager
def count_macs() -> Iterator[Counter]:
    """Record multiply-accumulates issued by :func:`matmul`/:func:`bmm`.

    Yields a :class:`collections.Counter` keyed by the ``tag`` passed to each
    product.  Nested contexts each see the work done inside them.
    """
    counter: Counter = Counter()
    _counters.stack.append(counter)
    try:
        yield counter
    finally:
        _counters.stack.pop()


def _record(tag: str, macs: int) -> None:
    for counter in _counters.stack:
        counter[tag] += macs


# --------------------------------------------------------------------------
# kernels


def matmul(a: np.ndarray, b: np.ndarray, tag: str = "other") -> np.ndarray:
    """``c[i, j] = sum_k a[i, k] * b[k, j]`` for 2-D operands."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    _record(tag, a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def bmm(a: np.ndarray, b: np.ndarray, tag: str = "other") -> np.ndarray:
    """Batched product over identical leading dims: ``(..., M, K) x (..., K, N)``."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"bmm batch dims differ: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm inner dims differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"bmm dtype mismatch: {a.dtype} vs {b.dtype}")
    _record(tag, int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    Entries equal to ``-inf`` are treated as masked out; every row must keep
    at least one finite entry.
    """
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError("softmax_rows received NaN or +inf input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
