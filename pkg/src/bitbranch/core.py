"""Dense tensor helpers, deterministic RNG, and binary tensor serialization.

All numeric data is carried by row-major (C-order) float64 ndarrays.
Serialized tensors are stored as float32 with an explicit little-endian
header so files are byte-identical across platforms.
"""

from __future__ import annotations

import io
import struct

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch or an invalid shape."""


class ConfigError(ValueError):
    """Parameter outside its supported range."""


class EncodingError(ValueError):
    """Value cannot be represented by the requested bit encoding."""


class DomainError(ValueError):
    """Input is off the grid the operation is defined on."""


class StageError(RuntimeError):
    """Model stage does not match the stored weight form."""


class DecompositionError(RuntimeError):
    """Weights cannot be decomposed into {-1,+1} bit planes."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``n`` independent streams without advancing it.

    Uses Philox jumps, so the children are disjoint from each other and from
    the parent's future output. Split before fanning work out to threads.
    """
    return [np.random.Generator(rng.bit_generator.jumped(i + 1)) for i in range(n)]


# ---------------------------------------------------------------------------
# Tensor construction and arithmetic
# ---------------------------------------------------------------------------

def tensor_new(shape, fill=0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Allocate a row-major float64 tensor.

    ``fill`` is either a constant or a tuple ``("uniform", lo, hi)`` drawn
    from ``rng``. All dimensions must be >= 1.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    if isinstance(fill, tuple):
        kind, lo, hi = fill
        if kind != "uniform":
            raise ConfigError(f"unknown fill spec {kind!r}")
        if rng is None:
            raise ConfigError("random fill requires an rng")
        out = rng.uniform(lo, hi, size=shape)
    else:
        out = np.full(shape, float(fill), dtype=np.float64)
    assert_finite(out, "tensor_new")
    return np.ascontiguousarray(out, dtype=np.float64)


def matmul_f(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float reference matrix product; the oracle for every quantized path."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul_f expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def assert_finite(x: np.ndarray, where: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {where}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round with ties away from zero, the fixed convention everywhere.

    numpy's ``round`` rounds ties to even, which is not bit-stable across
    the quantization grids used here.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


# ---------------------------------------------------------------------------
# Binary serialization: u64-LE rank, u64-LE dims, f32-LE payload
# ---------------------------------------------------------------------------

def tensor_to_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    header = struct.pack("<Q", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode one tensor; returns (tensor, bytes consumed)."""
    (rank,) = struct.unpack_from("<Q", buf, 0)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    n = int(np.prod(dims)) if rank else 1
    off = 8 + 8 * rank
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
    return data.astype(np.float64).reshape(dims), off + 4 * n


def write_tensor(fh: io.BufferedIOBase, a: np.ndarray) -> None:
    fh.write(tensor_to_bytes(a))


def read_tensor(fh: io.BufferedIOBase) -> np.ndarray:
    (rank,) = struct.unpack("<Q", fh.read(8))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(fh.read(4 * n), dtype="<f4", count=n)
    return data.astype(np.float64).reshape(dims)


def int_tensor_to_bytes(a: np.ndarray) -> bytes:
    """Same header as tensor_to_bytes but with an int16 payload (code grids).

    int16 covers every supported grid: odd codes reach +-255 at 8 bits.
    """
    a = np.ascontiguousarray(a)
    if a.size and (a.max() > 32767 or a.min() < -32768):
        raise EncodingError("codes out of int16 range")
    header = struct.pack("<Q", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.astype("<i2").tobytes()


def int_tensor_from_bytes(buf: bytes) -> tuple[np.ndarray, int]:
    (rank,) = struct.unpack_from("<Q", buf, 0)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    n = int(np.prod(dims)) if rank else 1
    off = 8 + 8 * rank
    data = np.frombuffer(buf, dtype="<i2", count=n, offset=off)
    return data.astype(np.int64).reshape(dims), off + 2 * n
