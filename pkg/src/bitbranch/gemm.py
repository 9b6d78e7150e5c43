"""Decomposed M x K-branch matrix multiply over packed {-1,+1} planes.

Both operands are stored row-major over the reduction axis: an encoded
P x N matrix keeps, for each of its P rows, one packed plane per bit. The
product of an M-bit X (P x N) with a K-bit W (Q x N) is the exact integer

    acc[p, q] = sum_m sum_k 2^(m+k-2) * xnor_popcount(x_plane_m, w_plane_k)

which equals the plain integer matmul of the odd-grid codes. A final scale
r / ((2^M - 1)(2^K - 1)) restores quantized-real units.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bitops, quant
from .core import DomainError, ShapeError

# N * (2^M - 1) * (2^K - 1) must stay below this for exact int64 accumulation.
_ACC_LIMIT = 1 << 62


@dataclass(frozen=True)
class EncodedMatrix:
    """Bit-plane matrix: words[r, m, :] is plane m+1 of logical row r."""

    bits: int
    rows: int
    cols: int
    words: np.ndarray  # uint64, shape (rows, bits, words_per_row), zero-padded

    @property
    def words_per_row(self) -> int:
        return self.words.shape[2]


def _pack_rows(plane_digits: np.ndarray, n_words: int) -> np.ndarray:
    """Pack one digit plane row-wise: (rows, cols) {-1,+1} -> (rows, n_words)."""
    rows = plane_digits.shape[0]
    raw = np.packbits(plane_digits == 1, axis=1, bitorder="little")
    padded = np.zeros((rows, n_words * 8), dtype=np.uint8)
    padded[:, : raw.shape[1]] = raw
    return padded.view("<u8").astype(np.uint64)


def encode_codes(codes: np.ndarray, bits: int) -> EncodedMatrix:
    """Pack a 2-D grid of odd codes into row planes."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise ShapeError(f"expected a 2-D code grid, got shape {codes.shape}")
    rows, cols = codes.shape
    digits = quant.odd_code_digits(codes, bits).reshape(bits, rows, cols)
    n_words = (cols + bitops.WORD_BITS - 1) // bitops.WORD_BITS
    words = np.zeros((rows, bits, n_words), dtype=np.uint64)
    for m in range(bits):
        words[:, m, :] = _pack_rows(digits[m], n_words)
    return EncodedMatrix(bits=bits, rows=rows, cols=cols, words=words)


def encode_matrix(x: np.ndarray, bits: int) -> EncodedMatrix:
    """Quantize a real matrix onto the odd grid and pack its digit planes."""
    q = quant.quantize_odd(x, bits)
    return encode_codes(q.codes, bits)


def encode_digit_planes(digits: np.ndarray) -> EncodedMatrix:
    """Pack raw {-1,+1} digit planes of shape (bits, rows, cols)."""
    digits = np.asarray(digits)
    bits, rows, cols = digits.shape
    n_words = (cols + bitops.WORD_BITS - 1) // bitops.WORD_BITS
    words = np.zeros((rows, bits, n_words), dtype=np.uint64)
    for m in range(bits):
        words[:, m, :] = _pack_rows(digits[m], n_words)
    return EncodedMatrix(bits=bits, rows=rows, cols=cols, words=words)


def decode_codes(enc: EncodedMatrix) -> np.ndarray:
    """Recover the odd code grid from the packed planes."""
    codes = np.zeros((enc.rows, enc.cols), dtype=np.int64)
    for r in range(enc.rows):
        for m in range(enc.bits):
            plane = bitops.BitPlane(words=enc.words[r, m], n_valid=enc.cols)
            codes[r] += (1 << m) * bitops.unpack(plane).astype(np.int64)
    return codes


def _gemm_rows(x: EncodedMatrix, w: EncodedMatrix, row_lo: int, row_hi: int) -> np.ndarray:
    n = x.cols
    acc = np.zeros((row_hi - row_lo, w.rows), dtype=np.int64)
    # m-major then k; the order is irrelevant to the exact result but fixed
    # for reproducible timing.
    for m in range(x.bits):
        a = x.words[row_lo:row_hi, m, :]  # (p, nw)
        for k in range(w.bits):
            b = w.words[:, k, :]  # (Q, nw)
            dots = bitops.xnor_popcount_words(a[:, None, :], b[None, :, :], n)
            acc += (1 << (m + k)) * dots
    return acc


def encoded_gemm(x: EncodedMatrix, w: EncodedMatrix, threads: int = 1) -> np.ndarray:
    """Exact integer accumulator of the decomposed product, shape (P, Q)."""
    if x.cols != w.cols:
        raise ShapeError(f"reduction lengths differ: {x.cols} vs {w.cols}")
    worst = x.cols * ((1 << x.bits) - 1) * ((1 << w.bits) - 1)
    assert worst <= _ACC_LIMIT, "accumulator could overflow int64"
    if threads <= 1 or x.rows < 2 * threads:
        return _gemm_rows(x, w, 0, x.rows)
    bounds = np.linspace(0, x.rows, threads + 1, dtype=int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda i: _gemm_rows(x, w, bounds[i], bounds[i + 1]), range(threads))
    return np.vstack(list(parts))


def scale_output(acc: np.ndarray, m_bits: int, k_bits: int, r: float = 1.0) -> np.ndarray:
    """Map integer accumulators back to quantized-real units (1/9 at 2 bits)."""
    scale = r / (((1 << m_bits) - 1) * ((1 << k_bits) - 1))
    return np.asarray(acc, dtype=np.float64) * scale


def quantized_gemm(
    x: np.ndarray, w: np.ndarray, m_bits: int, k_bits: int, r: float = 1.0, threads: int = 1
) -> np.ndarray:
    """Quantize, decompose, multiply with the bit kernel, and rescale."""
    acc = encoded_gemm(encode_matrix(x, m_bits), encode_matrix(w, k_bits), threads=threads)
    return scale_output(acc, m_bits, k_bits, r)


# ---------------------------------------------------------------------------
# {0,1}-scheme comparison oracle
# ---------------------------------------------------------------------------

def _to_zero_one(q: float, bits: int) -> float:
    """Invert xq = 2/(2^M - 1) * x01 - 1; errors if q is off the grid.

    Integer x01 in [0, 2^M - 1] corresponds one-to-one to the odd code
    2 * x01 - (2^M - 1), so grid membership is just integrality in range.
    """
    levels = (1 << bits) - 1
    x01 = (q + 1.0) * levels / 2.0
    nearest = np.round(x01)
    if abs(x01 - nearest) > 1e-9 or not 0 <= nearest <= levels:
        raise DomainError(f"{q} is not on the {bits}-bit quantized grid")
    return float(nearest)


def zero_one_product(xq: float, wq: float, m_bits: int, k_bits: int) -> float:
    """Product of two quantized reals evaluated through the {0,1} encoding.

    Expands both factors into non-negative integers and evaluates the
    four-term polynomial; used as a cross-check against the single-term
    {-1,+1} form, which the library actually computes.
    """
    x01 = _to_zero_one(float(xq), m_bits)
    w01 = _to_zero_one(float(wq), k_bits)
    am = 2.0 / ((1 << m_bits) - 1)
    ak = 2.0 / ((1 << k_bits) - 1)
    return am * ak * x01 * w01 - am * x01 - ak * w01 + 1.0
