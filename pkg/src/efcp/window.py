"""Gradient ring buffers and the SP / LCG kernels.

``SparseGradWindow`` stores the last ``m`` blockwise Top-k gradients as an
index matrix ``I`` and a value matrix ``V`` of shape ``(m, k')``. Because
every row has the same per-block quota, the entries of block ``b`` sit at
the same column offsets ``[off[b], off[b+1])`` in every row, which is what
lets LCG work one block interval at a time with a private accumulator.

Both kernels use a fixed reduction order (SP: ascending index within a
row; LCG: ascending logical age per output coordinate), so results are
bit-identical for any worker count.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .compressors import (
    DEFAULT_BLOCK_SIZE,
    SparseCompressed,
    block_quotas,
    densify,
    resolve_dtype,
)
from .errors import ShapeError

MAGIC = b"EFCPGW1"
_HEADER = struct.Struct("<7sQQQQdQQB")


def _chunks(n, parts):
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).round().astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class RingCursor:
    """Cursor bookkeeping shared by the sparse and dense windows."""

    def __init__(self, m):
        if m < 1:
            raise ShapeError(f"window size must be >= 1, got {m}")
        self.m = int(m)
        self.next_row = 0
        self.filled = 0

    @property
    def age_order(self):
        """Physical rows from oldest to newest."""
        if self.filled < self.m:
            return np.arange(self.filled)
        return (np.arange(self.m) + self.next_row) % self.m

    def _advance(self):
        row = self.next_row
        evicted = row if self.filled == self.m else None
        self.next_row = (row + 1) % self.m
        self.filled = min(self.filled + 1, self.m)
        return row, evicted

    def occupied_mask(self):
        mask = np.zeros(self.m, dtype=bool)
        mask[: self.filled] = True
        return mask


class SparseGradWindow(RingCursor):
    """Ring buffer ``G = (I, V)`` of blockwise-sparse gradients.

    Parameters
    ----------
    m : window capacity
    d : model dimension
    density : Top-k density shared by every row
    block_size : Top-k block width ``B_d``
    dtype : storage precision for values (``'f32'`` or ``'f64'``)
    threads : worker count for SP / LCG; never changes results
    """

    def __init__(self, m, d, density, block_size=DEFAULT_BLOCK_SIZE, dtype="f32", threads=1):
        super().__init__(m)
        self.d = int(d)
        self.density = float(density)
        self.block_size = int(block_size)
        self.quotas = block_quotas(self.d, self.block_size, self.density)
        self.offsets = np.concatenate([[0], np.cumsum(self.quotas)])
        self.k = int(self.offsets[-1])
        self.dtype = resolve_dtype(dtype)
        self.threads = int(threads)
        self.I = np.zeros((self.m, self.k), dtype=np.uint32)
        self.V = np.zeros((self.m, self.k), dtype=self.dtype)
        self.last_row = None

    @property
    def n_blocks(self):
        return self.quotas.size

    def _check_structure(self, c):
        if not isinstance(c, SparseCompressed):
            raise ShapeError(f"sparse window needs SparseCompressed rows, got {type(c).__name__}")
        if c.d != self.d:
            raise ShapeError(f"row dimension {c.d} != window dimension {self.d}")
        if c.nnz != self.k:
            raise ShapeError(f"row has {c.nnz} entries, window rows hold {self.k}")
        idx = c.indices
        if idx.size and (idx[0] < 0 or idx[-1] >= self.d or np.any(np.diff(idx) <= 0)):
            raise ShapeError("row indices must be strictly increasing within [0, d)")
        counts = np.bincount(idx // self.block_size, minlength=self.n_blocks)
        if counts.size != self.n_blocks or np.any(counts != self.quotas):
            raise ShapeError("row does not follow the window's per-block quotas")

    def set_row(self, c):
        """Write ``c`` over the oldest row. Returns ``(physical_row, evicted_row_or_None)``."""
        self._check_structure(c)
        row, evicted = self._advance()
        self.I[row] = c.indices
        self.V[row] = c.values
        self.last_row = row
        return row, evicted

    def row_dense(self, r, dtype=np.float64):
        out = np.zeros(self.d, dtype=dtype)
        if r < self.filled:
            out[self.I[r].astype(np.int64)] = self.V[r]
        return out

    def to_dense(self, dtype=np.float64):
        """Dense ``m x d`` copy of the window in physical row order."""
        return np.stack([self.row_dense(r, dtype) for r in range(self.m)])

    def _sp_rows(self, x, lo, hi, out):
        idx = self.I[lo:hi].astype(np.intp)
        prod = self.V[lo:hi].astype(np.float64) * x[idx]
        # add.accumulate is strictly sequential along the row
        out[lo:hi] = np.add.accumulate(prod, axis=1)[:, -1] if self.k else 0.0

    def sp(self, x):
        """Scalar products ``omega_r = <row_r, x>`` for every physical row."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ShapeError(f"sp expects a vector of length {self.d}, got {x.shape}")
        out = np.zeros(self.m)
        n = self.filled
        if n == 0:
            return out
        spans = _chunks(n, self.threads)
        if len(spans) == 1:
            self._sp_rows(x, 0, n, out)
        else:
            with ThreadPoolExecutor(len(spans)) as pool:
                list(pool.map(lambda s: self._sp_rows(x, s[0], s[1], out), spans))
        return out

    def _lcg_blocks(self, coeffs, rows, b_lo, b_hi, out):
        start_d = b_lo * self.block_size
        end_d = min(self.d, b_hi * self.block_size)
        o_lo, o_hi = self.offsets[b_lo], self.offsets[b_hi]
        acc = np.zeros(end_d - start_d)
        for r in rows:
            idx = self.I[r, o_lo:o_hi].astype(np.intp) - start_d
            acc[idx] += coeffs[r] * self.V[r, o_lo:o_hi].astype(np.float64)
        out[start_d:end_d] = acc

    def lcg(self, coeffs):
        """Linear combination ``sum_r coeffs[r] * row_r`` over occupied rows.

        ``coeffs`` is indexed by physical row; entries for empty rows are
        ignored.
        """
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (self.m,):
            raise ShapeError(f"lcg expects {self.m} coefficients, got {coeffs.shape}")
        out = np.zeros(self.d)
        rows = self.age_order
        if rows.size == 0:
            return out
        spans = _chunks(self.n_blocks, self.threads)
        if len(spans) == 1:
            self._lcg_blocks(coeffs, rows, 0, self.n_blocks, out)
        else:
            with ThreadPoolExecutor(len(spans)) as pool:
                list(pool.map(lambda s: self._lcg_blocks(coeffs, rows, s[0], s[1], out), spans))
        return out

    def memory_bytes(self, value_bytes=None, lcg_buffer=True):
        vb = self.dtype.itemsize if value_bytes is None else value_bytes
        return sparse_memory_bytes(self.m, self.d, self.k, vb, lcg_buffer)

    def dump(self, path):
        """Write ``(I, V, cursor)`` to ``path`` in the little-endian window format."""
        header = _HEADER.pack(
            MAGIC, self.m, self.d, self.k, self.block_size, self.density,
            self.next_row, self.filled, self.dtype.itemsize,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.I.astype("<u4").tobytes())
            fh.write(self.V.astype(self.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path, threads=1):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise ShapeError("truncated window file")
        magic, m, d, k, block, density, next_row, filled, vb = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ShapeError(f"bad magic {magic!r}")
        dtype = {4: "f32", 8: "f64"}.get(vb)
        if dtype is None:
            raise ShapeError(f"unsupported value width {vb}")
        w = cls(m, d, density, block, dtype=dtype, threads=threads)
        if w.k != k:
            raise ShapeError(f"header k'={k} inconsistent with quotas ({w.k})")
        pos = _HEADER.size
        n = m * k
        w.I[:] = np.frombuffer(raw, "<u4", n, pos).reshape(m, k)
        pos += 4 * n
        w.V[:] = np.frombuffer(raw, w.dtype.newbyteorder("<"), n, pos).reshape(m, k)
        w.next_row, w.filled = int(next_row), int(filled)
        return w


class DenseGradWindow(RingCursor):
    """Dense ``m x d`` ring buffer with the same interface as ``SparseGradWindow``.

    Uses the same fixed reduction orders as the sparse kernels (ascending
    coordinate for SP, ascending age for LCG) rather than BLAS, so a sparse
    window holding every coordinate produces bit-identical results.
    """

    def __init__(self, m, d, dtype="f64", threads=1):
        super().__init__(m)
        self.d = int(d)
        self.dtype = resolve_dtype(dtype)
        self.threads = int(threads)
        self.G = np.zeros((self.m, self.d), dtype=self.dtype)
        self.last_row = None

    def set_row(self, c):
        g = densify(c)
        if g.shape != (self.d,):
            raise ShapeError(f"row of shape {g.shape} does not fit window dimension {self.d}")
        row, evicted = self._advance()
        self.G[row] = g
        self.last_row = row
        return row, evicted

    def row_dense(self, r, dtype=np.float64):
        return self.G[r].astype(dtype)

    def to_dense(self, dtype=np.float64):
        return self.G.astype(dtype)

    def sp(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ShapeError(f"sp expects a vector of length {self.d}, got {x.shape}")
        out = np.zeros(self.m)
        n = self.filled
        if n == 0 or self.d == 0:
            return out
        spans = _chunks(n, self.threads)
        if len(spans) == 1:
            self._sp_rows(x, 0, n, out)
        else:
            with ThreadPoolExecutor(len(spans)) as pool:
                list(pool.map(lambda s: self._sp_rows(x, s[0], s[1], out), spans))
        return out

    def _sp_rows(self, x, lo, hi, out):
        out[lo:hi] = np.add.accumulate(self.G[lo:hi].astype(np.float64) * x, axis=1)[:, -1]

    def _lcg_cols(self, coeffs, rows, lo, hi, out):
        acc = np.zeros(hi - lo)
        for r in rows:
            acc += coeffs[r] * self.G[r, lo:hi].astype(np.float64)
        out[lo:hi] = acc

    def lcg(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (self.m,):
            raise ShapeError(f"lcg expects {self.m} coefficients, got {coeffs.shape}")
        out = np.zeros(self.d)
        rows = self.age_order
        if rows.size == 0:
            return out
        spans = _chunks(self.d, self.threads)
        if len(spans) == 1:
            self._lcg_cols(coeffs, rows, 0, self.d, out)
        else:
            with ThreadPoolExecutor(len(spans)) as pool:
                list(pool.map(lambda s: self._lcg_cols(coeffs, rows, s[0], s[1], out), spans))
        return out

    def memory_bytes(self, value_bytes=4):
        return dense_memory_bytes(self.m, self.d, value_bytes)


def sparse_memory_bytes(m, d, k, value_bytes=4, lcg_buffer=True):
    """Bytes for indices, values, error feedback and kernel result buffers.

    Indices take 4 bytes each, the error-feedback vector and the SP result
    4-byte reals; the LCG result buffer (``4d``) is only counted when
    ``lcg_buffer`` is set (M-FAC needs it, GGT does not).
    """
    total = 4 * m * k + value_bytes * m * k + 4 * d + 4 * m
    if lcg_buffer:
        total += 4 * d
    return total


def dense_memory_bytes(m, d, value_bytes=4):
    return value_bytes * m * d
