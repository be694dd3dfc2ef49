"""Dense and sparse linear-algebra primitives.

Dense matrices and vectors are plain float32 numpy arrays; sparse
matrices are the CSR/BSR containers below. All operations are pure:
identical inputs yield bit-identical outputs (fixed accumulation order,
no threading). Arithmetic is 32-bit throughout the production path.

Sparse formats forbid stored zeros: construction drops exact zeros
(CSR) and all-zero blocks (BSR) so nnz honestly reflects the work a
sparsity-aware multiply performs.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _loops

__all__ = [
    "CsrMatrix",
    "BsrMatrix",
    "csr_from_dense",
    "bsr_from_dense",
    "densify",
    "dense_matmul",
    "spmm_csr",
    "spmm_bsr",
    "layer_norm",
    "gelu",
    "softmax_rows",
]


def _as_f32_matrix(a, name):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=np.float32)


def _as_f32_vector(a, name):
    a = np.asarray(a)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=np.float32)


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row matrix over 32-bit reals.

    row_ptr has length rows+1 with row_ptr[0]=0 and row_ptr[rows]=nnz;
    within each row col_idx is strictly increasing; stored values are
    nonzero and finite.
    """

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=np.int32))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float32))
        rp, ci, v = self.row_ptr, self.col_idx, self.values
        if self.rows < 1 or self.cols < 1:
            raise ValueError("CSR matrix must have positive dimensions")
        if rp.shape != (self.rows + 1,):
            raise ValueError("row_ptr length must be rows+1")
        if rp[0] != 0 or rp[-1] != len(v) or np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must start at 0, be non-decreasing, and end at nnz")
        if ci.shape != v.shape:
            raise ValueError("col_idx and values must have equal length")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.cols):
            raise ValueError("col_idx out of range")
        # strictly increasing within each row
        if len(ci) > 1:
            inc = np.diff(ci) > 0
            row_starts = rp[1:-1]  # positions where a new row begins
            inc_mask = np.ones(len(ci) - 1, dtype=bool)
            boundary = row_starts[(row_starts > 0) & (row_starts < len(ci))] - 1
            inc_mask[boundary] = False
            if np.any(~inc[inc_mask]):
                raise ValueError("col_idx must be strictly increasing within each row")
        if np.any(v == 0.0) or not np.all(np.isfinite(v)):
            raise ValueError("stored CSR values must be nonzero and finite")

    @property
    def nnz(self):
        return int(self.values.shape[0])

    @property
    def shape(self):
        return (self.rows, self.cols)


@dataclass(frozen=True)
class BsrMatrix:
    """Block sparse row matrix: CSR indexing over a grid of dense
    block_rows x block_cols blocks. No stored block is entirely zero."""

    rows: int
    cols: int
    block_rows: int
    block_cols: int
    block_ptr: np.ndarray
    block_idx: np.ndarray
    block_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "block_ptr", np.ascontiguousarray(self.block_ptr, dtype=np.int64))
        object.__setattr__(self, "block_idx", np.ascontiguousarray(self.block_idx, dtype=np.int32))
        object.__setattr__(self, "block_values", np.ascontiguousarray(self.block_values, dtype=np.float32))
        br, bc = self.block_rows, self.block_cols
        if br < 1 or bc < 1 or self.rows % br or self.cols % bc:
            raise ValueError(f"block shape {br}x{bc} must divide matrix shape {self.rows}x{self.cols}")
        grid_rows = self.rows // br
        grid_cols = self.cols // bc
        bp, bi, bv = self.block_ptr, self.block_idx, self.block_values
        if bp.shape != (grid_rows + 1,):
            raise ValueError("block_ptr length must be rows/block_rows + 1")
        if bp[0] != 0 or bp[-1] != len(bi) or np.any(np.diff(bp) < 0):
            raise ValueError("block_ptr must start at 0, be non-decreasing, and end at block count")
        if bv.shape != (len(bi), br, bc):
            raise ValueError("block_values must have shape (nblocks, block_rows, block_cols)")
        if len(bi) and (bi.min() < 0 or bi.max() >= grid_cols):
            raise ValueError("block_idx out of range")
        if len(bi) > 1:
            inc = np.diff(bi) > 0
            starts = bp[1:-1]
            mask = np.ones(len(bi) - 1, dtype=bool)
            boundary = starts[(starts > 0) & (starts < len(bi))] - 1
            mask[boundary] = False
            if np.any(~inc[mask]):
                raise ValueError("block_idx must be strictly increasing within each block row")
        if not np.all(np.isfinite(bv)):
            raise ValueError("stored block values must be finite")
        if len(bi) and np.any(np.all(bv.reshape(len(bi), -1) == 0.0, axis=1)):
            raise ValueError("stored blocks must not be entirely zero")

    @property
    def nnz_blocks(self):
        return int(self.block_idx.shape[0])

    @property
    def nnz(self):
        """Count of nonzero scalars inside stored blocks."""
        return int(np.count_nonzero(self.block_values))

    @property
    def shape(self):
        return (self.rows, self.cols)


def csr_from_dense(dense):
    """Build a CsrMatrix from a dense array, dropping exact zeros."""
    dense = _as_f32_matrix(dense, "dense")
    rows, cols = dense.shape
    nz_mask = dense != 0.0
    counts = nz_mask.sum(axis=1, dtype=np.int64)
    row_ptr = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    rr, cc = np.nonzero(nz_mask)
    return CsrMatrix(rows, cols, row_ptr, cc.astype(np.int32), dense[rr, cc])


def bsr_from_dense(dense, block_rows=1, block_cols=4):
    """Build a BsrMatrix from a dense array, dropping all-zero blocks."""
    dense = _as_f32_matrix(dense, "dense")
    rows, cols = dense.shape
    if rows % block_rows or cols % block_cols:
        raise ValueError(f"block shape {block_rows}x{block_cols} must divide {rows}x{cols}")
    grid_rows = rows // block_rows
    grid_cols = cols // block_cols
    blocks = dense.reshape(grid_rows, block_rows, grid_cols, block_cols).transpose(0, 2, 1, 3)
    keep = np.any(blocks != 0.0, axis=(2, 3))
    counts = keep.sum(axis=1, dtype=np.int64)
    block_ptr = np.zeros(grid_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=block_ptr[1:])
    gr, gc = np.nonzero(keep)
    block_values = np.ascontiguousarray(blocks[gr, gc])
    return BsrMatrix(rows, cols, block_rows, block_cols, block_ptr,
                     gc.astype(np.int32), block_values)


def densify(sparse):
    """Expand a CsrMatrix or BsrMatrix back to a dense float32 array."""
    if isinstance(sparse, CsrMatrix):
        out = np.zeros((sparse.rows, sparse.cols), dtype=np.float32)
        rows = np.repeat(np.arange(sparse.rows), np.diff(sparse.row_ptr))
        out[rows, sparse.col_idx] = sparse.values
        return out
    if isinstance(sparse, BsrMatrix):
        out = np.zeros((sparse.rows, sparse.cols), dtype=np.float32)
        br, bc = sparse.block_rows, sparse.block_cols
        grid_rows = np.repeat(np.arange(sparse.rows // br), np.diff(sparse.block_ptr))
        for b, (gr, gc) in enumerate(zip(grid_rows, sparse.block_idx)):
            out[gr * br:(gr + 1) * br, gc * bc:(gc + 1) * bc] = sparse.block_values[b]
        return out
    raise TypeError(f"expected CsrMatrix or BsrMatrix, got {type(sparse).__name__}")


def dense_matmul(a, b):
    """a @ b with fixed accumulation order (bit-reproducible per build)."""
    a = _as_f32_matrix(a, "a")
    b = _as_f32_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float32)
    _loops.matmul(a, b, out)
    return out


def spmm_csr(s, d):
    """Sparse (CSR) times dense. Equals dense_matmul(densify(s), d)."""
    if not isinstance(s, CsrMatrix):
        raise TypeError("s must be a CsrMatrix")
    d = _as_f32_matrix(d, "d")
    if s.cols != d.shape[0]:
        raise ValueError(f"dimension mismatch: {s.shape} @ {d.shape}")
    out = np.empty((s.rows, d.shape[1]), dtype=np.float32)
    _loops.spmm_csr(s.row_ptr, s.col_idx, s.values, d, out)
    return out


def spmm_bsr(s, d):
    """Sparse (BSR) times dense. Equals dense_matmul(densify(s), d)."""
    if not isinstance(s, BsrMatrix):
        raise TypeError("s must be a BsrMatrix")
    d = _as_f32_matrix(d, "d")
    if s.cols != d.shape[0]:
        raise ValueError(f"dimension mismatch: {s.shape} @ {d.shape}")
    out = np.empty((s.rows, d.shape[1]), dtype=np.float32)
    _loops.spmm_bsr(s.block_rows, s.block_cols, s.block_ptr, s.block_idx,
                    s.block_values, d, out)
    return out


def layer_norm(x, gain, bias, eps=1e-12):
    """(x - mean) / sqrt(var + eps) * gain + bias, population variance."""
    x = _as_f32_vector(x, "x")
    gain = _as_f32_vector(gain, "gain")
    bias = _as_f32_vector(bias, "bias")
    if not (x.shape == gain.shape == bias.shape):
        raise ValueError("x, gain and bias must have equal lengths")
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = np.empty((1, x.shape[0]), dtype=np.float32)
    _loops.layer_norm_rows(x.reshape(1, -1), gain, bias, eps, out)
    return out[0]


def gelu(x):
    """Exact Gaussian-error-linear unit x * Phi(x) (erf-based).

    Accepts a scalar or an ndarray; arrays go through the jitted loop.
    """
    if isinstance(x, np.ndarray):
        flat = np.ascontiguousarray(x.reshape(-1))
        out = np.empty_like(flat)
        _loops.gelu(flat, out)
        return out.reshape(x.shape)
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def softmax_rows(m):
    """Row-wise softmax with max-subtraction; each row sums to 1."""
    m = _as_f32_matrix(m, "m")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
