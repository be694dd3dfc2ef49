"""JIT-compiled inner loops for the linear-algebra kernels.

All loops use a fixed iteration order (row, then reduction, then column)
so results are bit-reproducible per build. The inner loop always runs
over the output columns, which keeps the accumulators independent and
lets LLVM vectorize without reassociating sums. No parallelism, no
fastmath. Functions are dtype-generic via numba dispatch: the float32
production path and the float64 gradient-check path share these loops.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def matmul(a, b, out):
    """out = a @ b with a (m,k), b (k,n), out (m,n), all C-contiguous."""
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


@njit(cache=True)
def spmm_csr(row_ptr, col_idx, values, d, out):
    """out = S @ d for CSR S; row-wise axpy over stored entries."""
    m = row_ptr.shape[0] - 1
    n = d.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for idx in range(row_ptr[i], row_ptr[i + 1]):
            v = values[idx]
            p = col_idx[idx]
            for j in range(n):
                out[i, j] += v * d[p, j]


@njit(cache=True)
def spmm_bsr(block_rows, block_cols, block_ptr, block_idx, block_values, d, out):
    """out = S @ d for BSR S with (block_rows x block_cols) blocks."""
    n_block_rows = block_ptr.shape[0] - 1
    n = d.shape[1]
    for i in range(out.shape[0]):
        for j in range(n):
            out[i, j] = 0.0
    for bi in range(n_block_rows):
        i0 = bi * block_rows
        for idx in range(block_ptr[bi], block_ptr[bi + 1]):
            p0 = block_idx[idx] * block_cols
            for r in range(block_rows):
                for c in range(block_cols):
                    v = block_values[idx, r, c]
                    for j in range(n):
                        out[i0 + r, j] += v * d[p0 + c, j]


@njit(cache=True)
def gelu(x, out):
    """Elementwise erf-based GELU over flat arrays: x * Phi(x)."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = v * (0.5 * (1.0 + math.erf(v * inv_sqrt2)))


@njit(cache=True)
def gelu_grad(x, out):
    """Elementwise d/dx of erf-based GELU: Phi(x) + x * phi(x)."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)
    for i in range(x.shape[0]):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * inv_sqrt2))
        pdf = math.exp(-0.5 * v * v) * inv_sqrt2pi
        out[i] = cdf + v * pdf


@njit(cache=True)
def layer_norm_rows(x, gain, bias, eps, out):
    """Row-wise layer norm with population variance, then affine."""
    m, h = x.shape
    for i in range(m):
        mean = x[i, 0] * 0.0
        for j in range(h):
            mean += x[i, j]
        mean /= h
        var = mean * 0.0
        for j in range(h):
            dv = x[i, j] - mean
            var += dv * dv
        var /= h
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(h):
            out[i, j] = (x[i, j] - mean) * inv * gain[j] + bias[j]


@njit(cache=True)
def fnv1a64_update(h, data):
    """Fold a uint8 array into a running FNV-1a-64 hash state."""
    prime = np.uint64(0x100000001B3)
    h = np.uint64(h)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def warmup(dtype=np.float32):
    """Compile every loop for `dtype` (cached to disk afterwards)."""
    a = np.ones((2, 2), dtype=dtype)
    out = np.empty((2, 2), dtype=dtype)
    matmul(a, a, out)
    spmm_csr(np.array([0, 1, 2], np.int64), np.array([0, 1], np.int32),
             np.ones(2, dtype=dtype), a, out)
    spmm_bsr(1, 2, np.array([0, 1, 2], np.int64), np.array([0, 0], np.int32),
             np.ones((2, 1, 2), dtype=dtype), a, out)
    flat = np.ones(2, dtype=dtype)
    gelu(flat, np.empty(2, dtype=dtype))
    gelu_grad(flat, np.empty(2, dtype=dtype))
    layer_norm_rows(a, flat, flat, 1e-12, out)
