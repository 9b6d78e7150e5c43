"""Analytic speedup model and micro-benchmarks of the packed kernel.

The analytic model for an N-length dot product with M-bit activations and
K-bit weights on an L-bit register machine is

    S = N * gamma / (M*K * (gamma + 2 * ceil(N / L)) + (M*K - 1) * beta)

with gamma the MAC-to-bitwise cost ratio and beta the add-to-bitwise
ratio. The empirical harness times the packed kernel against a deliberately
unoptimized scalar float baseline (plain Python loop), and reports the
vendor BLAS time separately; encoding happens outside the timed region.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from . import core, gemm
from .core import ConfigError

_REGISTER_WIDTHS = (8, 16, 32, 64, 128, 256, 512)


@dataclass(frozen=True)
class SpeedModelParams:
    gamma: float = 1.91  # MAC vs bitwise op cost
    beta: float = 0.955  # addition vs bitwise op cost (gamma / 2)
    register_bits: int = 64
    n: int = 8192

    def __post_init__(self):
        if not self.gamma > 0 or self.beta < 0:
            raise ConfigError("gamma must be positive and beta non-negative")
        if self.register_bits not in _REGISTER_WIDTHS:
            raise ConfigError(f"register width must be one of {_REGISTER_WIDTHS}")
        if self.n < 1:
            raise ConfigError("reduction length must be >= 1")


def speedup_model(m_bits: int, k_bits: int, p: SpeedModelParams) -> float:
    """Analytic speedup of the (M, K)-bit packed kernel over scalar float."""
    if not (1 <= m_bits <= 8 and 1 <= k_bits <= 8):
        raise ConfigError("bit widths must be in 1..8")
    mk = m_bits * k_bits
    words = math.ceil(p.n / p.register_bits)
    return p.n * p.gamma / (mk * (p.gamma + 2 * words) + (mk - 1) * p.beta)


def speedup_grid(p: SpeedModelParams) -> np.ndarray:
    """8 x 8 table of analytic speedups; entry [m-1, k-1] is (m, k) bits."""
    return np.array([[speedup_model(m, k, p) for k in range(1, 9)]
                     for m in range(1, 9)])


# ---------------------------------------------------------------------------
# Kernels under test
# ---------------------------------------------------------------------------

def scalar_gemm(a: np.ndarray, b_t: np.ndarray) -> list:
    """Unoptimized scalar float baseline: plain Python triple loop."""
    p, n = a.shape
    q = b_t.shape[0]
    al = a.tolist()
    bl = b_t.tolist()
    out = [[0.0] * q for _ in range(p)]
    for i in range(p):
        ai = al[i]
        row = out[i]
        for j in range(q):
            bj = bl[j]
            s = 0.0
            for t in range(n):
                s += ai[t] * bj[t]
            row[j] = s
    return out


def _median_ns(fn, repeats: int, warmup: int = 3) -> int:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def _timer_resolution_ns() -> int:
    best = None
    for _ in range(50):
        t0 = time.perf_counter_ns()
        t1 = time.perf_counter_ns()
        while t1 == t0:
            t1 = time.perf_counter_ns()
        d = t1 - t0
        best = d if best is None else min(best, d)
    return best


def bench_gemm(sizes, precisions, repeats: int = 11, seed: int = 0,
               threads: int = 1, warmup: int = 3) -> list[dict]:
    """Time scalar float, BLAS float, and each (M, K) packed kernel.

    ``sizes`` is a list of (P, N, Q) triples and ``precisions`` a list of
    (M, K) pairs. Each packed configuration is checked once against the
    integer code-matmul oracle before timing. Rows use the schema
    kernel, M, K, P, N, Q, median_ns, speedup_vs_scalar.
    """
    if repeats <= 0:
        return []
    rng = core.make_rng(seed)
    resolution = _timer_resolution_ns()
    rows = []
    for (p, n, q) in sizes:
        a = rng.uniform(-1, 1, size=(p, n))
        b = rng.uniform(-1, 1, size=(q, n))
        scalar_ns = _median_ns(lambda: scalar_gemm(a, b), repeats, warmup)
        rows.append({"kernel": "scalar_float", "M": 0, "K": 0, "P": p, "N": n,
                     "Q": q, "median_ns": scalar_ns, "speedup_vs_scalar": 1.0})
        blas_ns = _median_ns(lambda: a @ b.T, repeats, warmup)
        rows.append({"kernel": "blas_float", "M": 0, "K": 0, "P": p, "N": n,
                     "Q": q, "median_ns": blas_ns,
                     "speedup_vs_scalar": scalar_ns / max(blas_ns, 1)})
        packed_label = "packed" if threads <= 1 else f"packed_t{threads}"
        for (m_bits, k_bits) in precisions:
            xe = gemm.encode_matrix(a, m_bits)
            we = gemm.encode_matrix(b, k_bits)
            acc = gemm.encoded_gemm(xe, we, threads=threads)
            oracle = gemm.decode_codes(xe) @ gemm.decode_codes(we).T
            if not np.array_equal(acc, oracle):
                raise AssertionError(f"packed kernel diverged at M={m_bits}, K={k_bits}")
            packed_ns = _median_ns(
                lambda: gemm.encoded_gemm(xe, we, threads=threads), repeats, warmup)
            rows.append({"kernel": packed_label, "M": m_bits, "K": k_bits, "P": p,
                         "N": n, "Q": q, "median_ns": packed_ns,
                         "speedup_vs_scalar": scalar_ns / max(packed_ns, 1)})
            if packed_ns < 50 * resolution:
                rows.append({"kernel": "timer_warning", "M": m_bits, "K": k_bits,
                             "P": p, "N": n, "Q": q, "median_ns": packed_ns,
                             "speedup_vs_scalar": 0.0})
    return rows


CSV_FIELDS = ["kernel", "M", "K", "P", "N", "Q", "median_ns", "speedup_vs_scalar"]


def write_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_plot_data(rows: list[dict], path: str) -> None:
    """Gnuplot-friendly bars: one (M K speedup) line per packed kernel row."""
    with open(path, "w") as fh:
        fh.write("# M K speedup_vs_scalar\n")
        last_m = None
        for row in rows:
            if not row["kernel"].startswith("packed"):
                continue
            if last_m is not None and row["M"] != last_m:
                fh.write("\n")
            last_m = row["M"]
            fh.write(f"{row['M']} {row['K']} {row['speedup_vs_scalar']:.4f}\n")
