"""Dense float64 numerics shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the shape/domain checking the higher layers rely on,
a counter-based RNG with a documented stream layout, central finite differences,
and the ``MPTENSOR`` binary dump format used for fixtures and checkpoints.

MPTENSOR layout (all integers little-endian)::

    bytes 0..7    magic  b"MPTENSOR"
    bytes 8..11   u32    rank
    next 4*rank   u32    dims[rank]
    remainder     f64    payload, row-major, prod(dims) values
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np

MAGIC = b"MPTENSOR"


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ArithmeticError):
    """A value is outside the domain of an operation (NaN, Inf, singular...)."""


def as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64, order="C")


def matmul(a, b) -> np.ndarray:
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    m = as_f64(m)
    if not np.all(np.isfinite(m)):
        raise DomainError("softmax_rows requires finite input")
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = as_f64(x).ravel().copy()
    grad = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        fp = float(f(x))
        x[k] = orig - h
        fm = float(f(x))
        x[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"f is not finite when perturbing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox4x64 generator keyed by ``(seed, stream)`` with the counter at zero.

    Any Philox4x64-10 implementation given the same two 64-bit key words
    reproduces the stream; ``stream`` selects an independent sub-stream.
    """
    if not (0 <= seed < 2**64 and 0 <= stream < 2**64):
        raise ValueError("seed and stream must be unsigned 64-bit integers")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def tensor_to_bytes(a) -> bytes:
    a = as_f64(a)
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise ValueError("not an MPTENSOR payload (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 8 * count:
        raise ValueError(f"payload holds {len(buf) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def write_tensor(path, a) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
