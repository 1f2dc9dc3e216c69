"""Hot scan loops, JIT-compiled.

The ADC scan is gather-bound. Two levers keep the load ports busy with
useful work: the per-query distance table is upcast to float64 once so the
inner loop needs no float32 conversion (the upcast is exact, so sums are
bit-identical), and for byte-wide codes eight codes are fetched per 64-bit
load and unpacked with shifts. Rows are interleaved in pairs to overlap the
float64 add latency chains. Accumulation order within a row is ascending
sub-space index, matching the scalar distance path, and the similarity
transform 1 - d/2 is applied in the same double precision arithmetic.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def scan_sims(table, codes, out):
    """out[i] = 1 - 0.5 * sum_j table[j, codes[i, j]] for any code width."""
    n, m = codes.shape
    quad = (n // 4) * 4
    for i in range(0, quad, 4):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        for j in range(m):
            a0 += table[j, codes[i, j]]
            a1 += table[j, codes[i + 1, j]]
            a2 += table[j, codes[i + 2, j]]
            a3 += table[j, codes[i + 3, j]]
        out[i] = 1.0 - 0.5 * a0
        out[i + 1] = 1.0 - 0.5 * a1
        out[i + 2] = 1.0 - 0.5 * a2
        out[i + 3] = 1.0 - 0.5 * a3
    for i in range(quad, n):
        acc = 0.0
        for j in range(m):
            acc += table[j, codes[i, j]]
        out[i] = 1.0 - 0.5 * acc


@numba.njit(cache=True, nogil=True)
def scan_sims_packed(table, packed, out):
    """Same sums as scan_sims for uint8 codes packed eight per uint64 word."""
    n, words = packed.shape
    pair = (n // 2) * 2
    for i in range(0, pair, 2):
        a0 = 0.0
        a1 = 0.0
        for w in range(words):
            j = w * 8
            b0 = packed[i, w]
            b1 = packed[i + 1, w]
            for lane in range(8):
                shift = 8 * lane
                a0 += table[j + lane, (b0 >> shift) & 0xFF]
                a1 += table[j + lane, (b1 >> shift) & 0xFF]
        out[i] = 1.0 - 0.5 * a0
        out[i + 1] = 1.0 - 0.5 * a1
    for i in range(pair, n):
        acc = 0.0
        for w in range(words):
            j = w * 8
            bits = packed[i, w]
            for lane in range(8):
                acc += table[j + lane, (bits >> (8 * lane)) & 0xFF]
        out[i] = 1.0 - 0.5 * acc


def warm_up():
    """Trigger JIT compilation for every scan variant outside timed sections."""
    table = np.zeros((8, 4), dtype=np.float64)
    out = np.empty(5, dtype=np.float64)
    scan_sims(table, np.zeros((5, 8), dtype=np.uint8), out)
    scan_sims(table, np.zeros((5, 8), dtype=np.uint16), out)
    scan_sims_packed(table, np.zeros((5, 1), dtype=np.uint64), out)
