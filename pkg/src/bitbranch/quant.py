"""Scalar quantizers, range activations, and the {-1,+1} digit encoders.

Two quantization grids coexist on purpose:

* ``linear``: round(clamp(x/t, -1, 1) * (2^(K-1) - 1)) * d with
  d = t / (2^(K-1) - 1). Contains even codes (including 0), so it is used
  for simulated quantized training but cannot be expanded into {-1,+1}
  digits.
* ``odd``: codes are odd integers in [-(2^M - 1), 2^M - 1], quantized
  value = code / (2^M - 1). Every odd code has an exact M-digit {-1,+1}
  expansion code = sum_m 2^(m-1) * c_m, so this is the canonical grid for
  anything that gets decomposed into bit planes.

The trigonometric encoder family maps a real in [-1,1] straight to its M
digits: plane M is sign(sin(pi * x * (2^M-1)/2^M)) and the lower planes use
the negated sine. It agrees with the canonical quantize-then-expand path
everywhere except on the measure-zero set of cell boundaries (the sine
zeros), where the sign is ill-defined; the canonical path owns boundary
semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bitops
from .core import ConfigError, EncodingError, round_half_away

MAX_BITS = 8

# Inputs within this distance of a cell edge (in units of |x|*(2^M - 1))
# snap to the edge, so exact rationals like 2/3 land on the closed side of
# their interval despite float rounding.
_EDGE_SNAP = 1e-9


# ---------------------------------------------------------------------------
# Range activations
# ---------------------------------------------------------------------------

def htanh(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def hrelu(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


_ACTIVATIONS = {
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "htanh": htanh,
    "hrelu": hrelu,
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise range activation: tanh, sigmoid, htanh, or hrelu."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(x, dtype=np.float64))


def activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of ``activation`` at x (hard variants use the closed interval)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 - s)
    if kind == "htanh":
        return ((x >= -1.0) & (x <= 1.0)).astype(np.float64)
    if kind == "hrelu":
        return ((x >= 0.0) & (x <= 1.0)).astype(np.float64)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Quantized / encoded containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedTensor:
    """Integer code grid plus the scale needed to dequantize it."""

    codes: np.ndarray  # int64
    bits: int
    t: float
    d: float
    grid: str  # "linear" | "odd"

    @property
    def shape(self):
        return self.codes.shape


@dataclass(frozen=True)
class EncodedTensor:
    """M packed digit planes; planes[0] is the lowest-significance plane."""

    planes: list[bitops.BitPlane]
    shape: tuple
    bits: int

    def reconstruct_codes(self) -> np.ndarray:
        """Sum of 2^(m-1) * c_m per element; always an odd integer."""
        total = np.zeros(int(np.prod(self.shape)), dtype=np.int64)
        for m, plane in enumerate(self.planes, start=1):
            total += (1 << (m - 1)) * bitops.unpack(plane).astype(np.int64)
        return total.reshape(self.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(np.float64) * q.d


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= MAX_BITS:
        raise ConfigError(f"bit width must be in 1..{MAX_BITS}, got {bits}")


# ---------------------------------------------------------------------------
# Quantizers
# ---------------------------------------------------------------------------

def quantize_linear(x: np.ndarray, bits: int, t: float = 1.0) -> QuantizedTensor:
    """Symmetric linear quantizer round(clamp(x/t, 1) * (2^(K-1)-1)) * d.

    The 1-bit case has no nonzero integer levels on this grid and
    degenerates to sign (codes +-1, d = t).
    """
    _check_bits(bits)
    if not t > 0:
        raise ConfigError(f"clamp threshold must be positive, got {t}")
    x = np.asarray(x, dtype=np.float64)
    if bits == 1:
        codes = np.where(x >= 0, 1, -1).astype(np.int64)
        return QuantizedTensor(codes=codes, bits=1, t=t, d=t, grid="linear")
    qmax = (1 << (bits - 1)) - 1
    codes = round_half_away(np.clip(x / t, -1.0, 1.0) * qmax).astype(np.int64)
    return QuantizedTensor(codes=codes, bits=bits, t=t, d=t / qmax, grid="linear")


def quantize_odd(x: np.ndarray, bits: int) -> QuantizedTensor:
    """Quantize onto the odd grid {+-1, +-3, ..., +-(2^M - 1)} / (2^M - 1).

    code = s * (2 * floor(|x| * (2^M - 1) / 2) + 1) with s = sign(x) and
    sign(0) = -1, which reproduces the closed/open interval pattern of the
    2-bit lookup table ([-1,-2/3] -> -3, (-2/3,0] -> -1, (0,2/3) -> +1,
    [2/3,1] -> +3) and its generalization. Inputs are clamped to [-1,1]
    first; values within 1e-9 of a cell edge snap onto it.
    """
    _check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    levels = (1 << bits) - 1
    xc = np.clip(x, -1.0, 1.0)
    y = np.abs(xc) * levels
    nearest = round_half_away(y)
    snap = np.abs(y - nearest) <= _EDGE_SNAP * np.maximum(1.0, np.abs(y))
    y = np.where(snap, nearest, y)
    mag = 2 * np.floor(y / 2.0) + 1
    mag = np.minimum(mag, levels)
    sign = np.where(xc > 0, 1.0, -1.0)
    codes = (sign * mag).astype(np.int64)
    return QuantizedTensor(codes=codes, bits=bits, t=1.0, d=1.0 / levels, grid="odd")


# ---------------------------------------------------------------------------
# Digit expansion
# ---------------------------------------------------------------------------

def odd_code_digits(codes: np.ndarray, bits: int) -> np.ndarray:
    """{-1,+1} digit planes of odd codes, shape (bits, n), plane 0 lowest.

    Per element, b = (code + 2^M - 1) / 2 is written in binary and each bit
    is mapped 0 -> -1, 1 -> +1; the weighted digit sum reproduces the code
    exactly.
    """
    _check_bits(bits)
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    levels = (1 << bits) - 1
    if codes.size and (np.any(np.abs(codes) > levels) or np.any(codes % 2 == 0)):
        raise EncodingError(
            f"codes must be odd integers with |code| <= {levels} for {bits}-bit expansion"
        )
    b = (codes + levels) >> 1
    planes = np.empty((bits, codes.size), dtype=np.int8)
    for m in range(1, bits + 1):
        planes[m - 1] = (2 * ((b >> (m - 1)) & 1) - 1).astype(np.int8)
    return planes


def codes_to_digits(q: QuantizedTensor) -> EncodedTensor:
    """Expand an odd-grid tensor into its exact M packed digit planes."""
    if q.grid != "odd":
        raise EncodingError(f"digit expansion needs the odd grid, got {q.grid!r}")
    digits = odd_code_digits(q.codes, q.bits)
    planes = [bitops.pack(digits[m], digits.shape[1]) for m in range(q.bits)]
    return EncodedTensor(planes=planes, shape=q.codes.shape, bits=q.bits)


def _sign_pm1(z: np.ndarray) -> np.ndarray:
    # sign with the zero input sent to -1; only exercised on sine zeros,
    # which the canonical quantizer path owns.
    return np.where(z > 0, 1, -1).astype(np.int8)


def mbit_encoder_digits(x: np.ndarray, bits: int) -> np.ndarray:
    """Trigonometric digit planes, shape (bits, n), plane 0 lowest.

    Plane M uses sign(sin(pi*x*(2^M-1)/2^M)); planes m < M use the negated
    sine. Valid on [-1,1] away from the sine zeros.
    """
    _check_bits(bits)
    x = np.clip(np.asarray(x, dtype=np.float64).reshape(-1), -1.0, 1.0)
    levels = (1 << bits) - 1
    planes = np.empty((bits, x.size), dtype=np.int8)
    for m in range(1, bits + 1):
        s = np.sin((levels / (1 << m)) * np.pi * x)
        planes[m - 1] = _sign_pm1(s if m == bits else -s)
    return planes


def mbit_encoder(x: np.ndarray, bits: int) -> EncodedTensor:
    """Packed trig-encoder planes for x in [-1,1] (training-time surrogate)."""
    x = np.asarray(x, dtype=np.float64)
    digits = mbit_encoder_digits(x, bits)
    planes = [bitops.pack(digits[m], digits.shape[1]) for m in range(bits)]
    return EncodedTensor(planes=planes, shape=x.shape, bits=bits)


def encoder_derivative(x, bits: int, m: int):
    """Derivative of the pre-sign sine of digit plane m, zero outside [-1,1].

    For plane M: (2^M-1)/2^m * pi * cos((2^M-1)/2^m * pi * x); lower planes
    carry the opposite sign.
    """
    _check_bits(bits)
    if not 1 <= m <= bits:
        raise ConfigError(f"plane index must be in 1..{bits}, got {m}")
    x = np.asarray(x, dtype=np.float64)
    c = ((1 << bits) - 1) / (1 << m)
    val = c * math.pi * np.cos(c * math.pi * x)
    if m != bits:
        val = -val
    out = np.where(np.abs(x) <= 1.0, val, 0.0)
    return out if out.ndim else float(out)


def encoder_boundaries(bits: int) -> np.ndarray:
    """Sorted zeros of all plane sines in [-1,1]; the quantization cell edges."""
    levels = (1 << bits) - 1
    pts = set()
    for m in range(1, bits + 1):
        step = (1 << m) / levels
        j = 0
        while j * step <= 1.0 + 1e-15:
            pts.add(round(j * step, 15))
            pts.add(round(-j * step, 15))
            j += 1
    return np.array(sorted(pts))


# ---------------------------------------------------------------------------
# 1-bit weight binarization
# ---------------------------------------------------------------------------

def binarize(w: np.ndarray) -> np.ndarray:
    """sign(htanh(w)) with sign(0) = +1; the 1-bit weight map."""
    w = np.asarray(w, dtype=np.float64)
    return np.where(w >= 0, 1.0, -1.0)


def binarize_grad_mask(w: np.ndarray) -> np.ndarray:
    """Straight-through mask for ``binarize``: 1 on |w| <= 1, else 0."""
    w = np.asarray(w, dtype=np.float64)
    return (np.abs(w) <= 1.0).astype(np.float64)
